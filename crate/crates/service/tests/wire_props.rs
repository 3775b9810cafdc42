use std::io::Cursor;

use proptest::prelude::*;
use vcbot_core::deliberation::TickRecord;
use vcbot_core::observer::CongruenceRow;
use vcbot_service::wire::{read_frame, write_frame, Body, Input, IntentLabels, Phase, State, WireMessage};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1.0f64..=1.0,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(f64::MIN_POSITIVE),
        Just(-0.0),
    ]
}

prop_compose! {
    fn records()(
        t in 0usize..100_000,
        robot in (finite(), finite()),
        human in prop::option::of((finite(), finite())),
        active in any::<bool>(),
        mixed in (finite(), finite()),
        nelbo in finite(),
        epochs in 0usize..100,
        wall_ms in finite(),
    ) -> TickRecord {
        TickRecord {
            t,
            robot: [robot.0, robot.1],
            human: human.map(|h| [h.0, h.1]),
            human_active: active,
            mixed: [mixed.0, mixed.1],
            nelbo,
            epochs,
            wall_ms,
        }
    }
}

fn same_bits(a: &TickRecord, b: &TickRecord) -> bool {
    let bits = |r: &TickRecord| {
        let mut v = vec![r.robot[0], r.robot[1], r.mixed[0], r.mixed[1], r.nelbo, r.wall_ms];
        if let Some(h) = r.human {
            v.extend(h);
        }
        v.into_iter().map(f64::to_bits).collect::<Vec<_>>()
    };
    a.t == b.t && a.epochs == b.epochs && a.human_active == b.human_active && a.human.is_some() == b.human.is_some() && bits(a) == bits(b)
}

proptest! {
    #[test]
    fn state_floats_survive_framing_bit_for_bit(record in records(), p in 0.0f64..=1.0, ack in prop::option::of(any::<u64>())) {
        let msg = WireMessage::new("s", record.t as u64, Body::State(State {
            phase: Phase::Running,
            record: record.clone(),
            labels: IntentLabels { human: Some("Wing".into()), robot: None },
            congruence: Some(CongruenceRow { t: record.t, event: 1, c: 1, p }),
            ack,
        }));
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        let back = read_frame(&mut Cursor::new(buf)).unwrap().unwrap();
        let Body::State(s) = &back.body else { panic!("kind changed") };
        prop_assert!(same_bits(&s.record, &record));
        prop_assert_eq!(s.congruence.as_ref().unwrap().p.to_bits(), p.to_bits());
        prop_assert_eq!(s.ack, ack);
    }

    #[test]
    fn input_round_trips_through_json(seq in any::<u64>(), x in finite(), y in finite(), active in any::<bool>()) {
        let msg = WireMessage::new("abc", 7, Body::Input(Input { seq, x, y, active }));
        let back = WireMessage::from_json(&msg.to_json().unwrap()).unwrap();
        let Body::Input(i) = back.body else { panic!("kind changed") };
        prop_assert_eq!((i.seq, i.x.to_bits(), i.y.to_bits(), i.active), (seq, x.to_bits(), y.to_bits(), active));
    }
}

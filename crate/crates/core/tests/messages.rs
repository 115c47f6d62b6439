use std::collections::BTreeMap;

use faro_core::gallery::Selector;
use faro_core::message::{decode_payload, deserialize_record, deserialize_reply, encode_payload, serialize_record, serialize_reply};
use faro_core::{
    Backend, BoundingBox, Detection, FaroRecord, FaroReply, Frame, Gallery, Payload, StoredTemplate, Template,
};
use proptest::prelude::*;

fn template() -> impl Strategy<Value = Template> {
    (prop::collection::vec(-1e6f64..1e6, 1..16), "[a-z]{1,8}", prop::option::of("[a-z0-9]{1,8}"))
        .prop_map(|(v, m, s)| Template { vector: v, modality: m, subject_id: s })
}

fn detection() -> impl Strategy<Value = Detection> {
    (0u32..500, 0u32..500, 1u32..100, 1u32..100, 0.0f64..=1.0, "[a-z]{0,6}", any::<u64>()).prop_map(
        |(x, y, w, h, score, label, id)| Detection { bbox: BoundingBox { x, y, w, h }, score, label, detection_id: id },
    )
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        Just(Payload::Empty),
        ("[a-z/+-]{1,20}", prop::collection::vec(any::<u8>(), 0..256)).prop_map(|(c, d)| Payload::generic(c, d)),
        prop::collection::vec(template(), 0..4).prop_map(Payload::TemplateList),
        prop::collection::vec(detection(), 0..4).prop_map(Payload::DetectionList),
        (1u32..24, 1u32..24).prop_flat_map(|(w, h)| {
            prop::collection::vec(any::<u8>(), (w * h) as usize).prop_map(move |d| Payload::Frame(Frame::gray(w, h, d).unwrap()))
        }),
    ]
}

proptest! {
    #[test]
    fn records_survive_the_wire(p in payload(), seq in any::<u64>(), target in "[a-z]{0,6}(/[a-z]{1,6})?",
                                opts in prop::collection::btree_map("[a-z.]{1,8}", "[ -~]{0,12}", 0..4)) {
        let mut r = FaroRecord::new(p).with_sequence(seq).with_target(target);
        r.options = opts;
        let back = deserialize_record(&serialize_record(&r).unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn replies_survive_the_wire(p in payload(), timings in prop::collection::vec(("[a-z@-]{1,10}", any::<u64>()), 0..4)) {
        let mut reply = FaroReply::ok(Default::default(), p);
        for (stage, micros) in timings {
            reply = reply.with_timing(stage, micros);
        }
        prop_assert_eq!(deserialize_reply(&serialize_reply(&reply).unwrap()).unwrap(), reply.clone());
        let err = FaroReply::error(reply.record_id, "CODE", "went wrong");
        prop_assert_eq!(deserialize_reply(&serialize_reply(&err).unwrap()).unwrap(), err);
    }

    #[test]
    fn bundles_keep_names_and_order(entries in prop::collection::vec(("[a-z]{1,6}", payload()), 0..5)) {
        let bundle = Payload::bundle(&entries).unwrap();
        prop_assert_eq!(bundle.as_bundle().unwrap().unwrap(), entries);
        prop_assert_eq!(decode_payload(&encode_payload(&bundle).unwrap()).unwrap(), bundle);
    }

    #[test]
    fn truncated_messages_are_rejected(p in payload(), cut in any::<prop::sample::Index>()) {
        let bytes = serialize_record(&FaroRecord::new(p)).unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(deserialize_record(&bytes[..n]).is_err());
    }
}

#[test]
fn gallery_store_replays_enrollments_and_deletions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.fgal");
    let t = |v: &[f64]| StoredTemplate::Plain(Template::new(v.to_vec(), "demo"));
    {
        let g = Gallery::open("g", Backend::Plain, &path).unwrap();
        g.enroll("ann", t(&[1.0, 0.0]), BTreeMap::from([("cam".into(), "1".into())])).unwrap();
        let bob = g.enroll("bob", t(&[0.0, 1.0]), BTreeMap::new()).unwrap();
        g.enroll("cy", t(&[1.0, 1.0]), BTreeMap::new()).unwrap();
        assert_eq!(g.delete(&Selector::Entry(bob)).unwrap(), 1);
        assert!(g.enroll("bad", t(&[1.0]), BTreeMap::new()).is_err(), "dimension mismatch");
    }
    let g = Gallery::open("g", Backend::Plain, &path).unwrap();
    let subjects: Vec<String> = g.entries().iter().map(|e| e.subject_id.clone()).collect();
    assert_eq!(subjects, ["ann", "cy"]);
    assert_eq!(g.entries()[0].source_meta["cam"], "1");
    let hit = g.search(&Template::new(vec![0.9, 0.1], "demo"), 1, None).unwrap();
    assert_eq!(hit.hits[0].subject_id, "ann");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(Gallery::open("g", Backend::Plain, &path).is_err(), "torn tail is reported");
}

use chrono::{DateTime, Utc};
use proptest::prelude::*;
use serde_json::{Map, Value};
use tdf_core::protocol::{Kind, Message, Request, Response, Status};

pub fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        any::<f64>().prop_filter("finite", |f| f.is_finite()).prop_map(Value::from),
        ".*".prop_map(Value::String),
        "[\\x00-\\x1f\"\\\\\u{2028}\u{1F600}]{0,8}".prop_map(Value::String),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(Value::Array),
            prop::collection::vec((".{0,12}", inner), 0..6).prop_map(|kv| Value::Object(kv.into_iter().collect::<Map<_, _>>())),
        ]
    })
}

pub fn kind() -> impl Strategy<Value = Kind> {
    prop::sample::select(Kind::ALL.to_vec())
}

pub fn status() -> impl Strategy<Value = Status> {
    prop::sample::select(vec![Status::Ok, Status::TestPass, Status::TestFail, Status::Error])
}

pub fn instant() -> impl Strategy<Value = DateTime<Utc>> {
    (0i64..4_102_444_800, 0u32..1_000_000_000).prop_map(|(s, ns)| DateTime::from_timestamp(s, ns).unwrap())
}

pub fn message() -> impl Strategy<Value = Message> {
    let request = (any::<u64>(), kind(), json_value(), prop::option::of(any::<u64>()))
        .prop_map(|(id, kind, payload, deadline_ms)| Message::Request(Request { id, kind, payload, deadline_ms }));
    let response = (-1i64..=i64::MAX, status(), json_value(), prop::option::of(instant()), any::<u64>()).prop_map(
        |(id, status, payload, agent_clock, duration_ms)| {
            Message::Response(Response { id, status, payload, agent_clock, duration_ms })
        },
    );
    prop_oneof![request, response]
}

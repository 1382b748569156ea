//! Input generators shared by the property tests and the acceptance suite.
#![allow(dead_code)]

use proptest::prelude::*;
use qosplane_core::protocol::{Body, Message, Rule, RuleAction, StatEntry, Status};
use qosplane_core::request::Granularity;
use qosplane_core::stage::StageInfo;

/// PSFA instances: (max_rate, epsilon, [(job_id, demand, usage)]).
pub fn instance() -> impl Strategy<Value = (f64, f64, Vec<(String, f64, f64)>)> {
    (
        1.0f64..500.0,
        prop_oneof![Just(0.0), Just(0.25), Just(0.5), Just(1.0)],
        prop::collection::vec((1.0f64..100.0, 0.0f64..150.0), 1..=8),
    )
        .prop_map(|(max_r, eps, rows)| {
            let rows = rows.into_iter().enumerate().map(|(i, (d, u))| (format!("job{i}"), d, u)).collect();
            (max_r, eps, rows)
        })
}

fn rate() -> impl Strategy<Value = f64> {
    prop_oneof![any::<f64>().prop_filter("NaN has no equality", |r| !r.is_nan()), Just(f64::INFINITY), 0.0f64..1e7]
}

fn status() -> impl Strategy<Value = Status> {
    prop::sample::select(Status::ALL.to_vec())
}

pub fn body() -> impl Strategy<Value = Body> {
    let s = || ".{0,24}";
    prop_oneof![
        (any::<u64>(), s(), any::<u32>(), s(), s()).prop_map(|(stage_id, job_id, pid, hostname, user_id)| {
            Body::RegisterStage(StageInfo { stage_id, job_id, pid, hostname, user_id })
        }),
        any::<u64>().prop_map(|stage_id| Body::RegisterAck { stage_id }),
        Just(Body::CollectReq),
        prop::collection::vec(
            (s(), any::<u32>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(
                |(job_id, channel_id, ops, bytes, window_ns)| StatEntry { job_id, channel_id, ops, bytes, window_ns }
            ),
            0..6
        )
        .prop_map(Body::CollectResp),
        (any::<u64>(), any::<u32>(), prop::sample::select(Granularity::ALL.to_vec()), s(), rate()).prop_map(
            |(stage_id, channel_id, granularity, value, rate)| Body::Rule(Rule {
                stage_id,
                channel_id,
                action: RuleAction::CreateChannel { granularity, value, rate }
            })
        ),
        (any::<u64>(), any::<u32>(), rate())
            .prop_map(|(stage_id, channel_id, rate)| Body::Rule(Rule { stage_id, channel_id, action: RuleAction::SetRate { rate } })),
        status().prop_map(Body::RuleAck),
        prop::collection::vec(any::<u8>(), 0..64).prop_map(Body::SetPolicy),
        status().prop_map(Body::PolicyAck),
        any::<u64>().prop_map(|stage_id| Body::DeregisterStage { stage_id }),
        status().prop_map(Body::DeregisterAck),
    ]
}

pub fn message() -> impl Strategy<Value = Message> {
    (any::<u64>(), body()).prop_map(|(c, b)| Message::new(c, b))
}

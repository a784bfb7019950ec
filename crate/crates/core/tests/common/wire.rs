//! Generators of well-formed wire messages.

use cortexloop::protocol::{Command, Request, Response};
use cortexloop::{Counters, DataKind, Event, SampleData, StreamHeader};
use proptest::collection::vec;
use proptest::prelude::*;

pub fn arb_kind() -> impl Strategy<Value = DataKind> {
    prop::sample::select(DataKind::ALL.to_vec())
}

pub fn arb_data() -> impl Strategy<Value = SampleData> {
    (arb_kind(), 1usize..6, 0usize..12).prop_flat_map(|(kind, c, n)| {
        let len = c * n;
        match kind {
            DataKind::Int16 => vec(any::<i16>(), len)
                .prop_map(move |values| SampleData::Int16 { n_channels: c, values })
                .boxed(),
            DataKind::Int32 => vec(any::<i32>(), len)
                .prop_map(move |values| SampleData::Int32 { n_channels: c, values })
                .boxed(),
            DataKind::Float32 => vec(any::<f32>(), len)
                .prop_map(move |values| SampleData::Float32 { n_channels: c, values })
                .boxed(),
            DataKind::Float64 => vec(any::<f64>(), len)
                .prop_map(move |values| SampleData::Float64 { n_channels: c, values })
                .boxed(),
        }
    })
}

pub fn arb_header() -> impl Strategy<Value = StreamHeader> {
    (1usize..8, any::<f32>(), arb_kind(), any::<u32>(), any::<u32>(), any::<bool>()).prop_flat_map(
        |(n, rate, kind, ns, ne, labelled)| {
            let labels = if labelled {
                vec("[a-zA-Z0-9 _.-]{0,6}", n).prop_map(Some).boxed()
            } else {
                Just(None).boxed()
            };
            labels.prop_map(move |channel_labels| StreamHeader {
                n_channels: n,
                sampling_rate_hz: rate as f64,
                channel_labels,
                data_kind: kind,
                n_samples_total: ns as u64,
                n_events_total: ne as u64,
            })
        },
    )
}

pub fn arb_event() -> impl Strategy<Value = Event> {
    (".{0,8}", any::<i32>(), any::<u64>(), any::<i32>(), any::<u32>()).prop_map(
        |(kind, value, sample, offset_samples, duration_samples)| Event {
            kind,
            value,
            sample,
            offset_samples,
            duration_samples,
        },
    )
}

pub fn arb_request() -> impl Strategy<Value = Request> {
    prop_oneof![
        arb_header().prop_map(Request::PutHeader),
        arb_data().prop_map(Request::PutData),
        vec(arb_event(), 0..5).prop_map(Request::PutEvents),
        Just(Request::GetHeader),
        (any::<u64>(), any::<u64>()).prop_map(|(begin, end)| Request::GetData { begin, end }),
        (any::<u64>(), any::<u64>()).prop_map(|(begin, end)| Request::GetEvents { begin, end }),
        Just(Request::Flush),
        (any::<u64>(), any::<u64>(), any::<u32>()).prop_map(|(min_samples, min_events, timeout_ms)| {
            Request::WaitData { min_samples, min_events, timeout_ms }
        }),
    ]
}

pub fn arb_response() -> impl Strategy<Value = (Response, Command)> {
    let counters = (any::<u64>(), any::<u64>()).prop_map(|(n_samples, n_events)| Counters { n_samples, n_events });
    prop_oneof![
        (
            counters,
            prop::sample::select(vec![Command::PutHdr, Command::PutDat, Command::PutEvt, Command::Flush, Command::WaitDat])
        )
            .prop_map(|(c, cmd)| (Response::Counters(c), cmd)),
        arb_header().prop_map(|h| (Response::Header(h), Command::GetHdr)),
        arb_data().prop_map(|d| (Response::Data(d), Command::GetDat)),
        vec(arb_event(), 0..5).prop_map(|e| (Response::Events(e), Command::GetEvt)),
        (any::<u32>(), arb_request()).prop_map(|(code, r)| (Response::Error(code), r.command())),
    ]
}

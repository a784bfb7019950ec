mod common;

use common::wire::{arb_event, arb_header, arb_request, arb_response};
use cortexloop::protocol::{
    decode_request, decode_response, encode_request, encode_response, read_frame, split_frame, Command,
    DecodeError, Request, HEADER_LEN,
};
use proptest::collection::vec;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    // Float payloads may carry NaN, so identity is checked on the encoded bits.
    #[test]
    fn requests_survive_encode_decode(req in arb_request()) {
        let bytes = encode_request(&req);
        prop_assert_eq!(bytes.len(), HEADER_LEN + u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize);
        let back = decode_request(&bytes).unwrap();
        prop_assert_eq!(encode_request(&back), bytes);
        prop_assert_eq!(back.command(), req.command());
    }

    #[test]
    fn responses_survive_encode_decode((resp, cmd) in arb_response()) {
        let bytes = encode_response(&resp);
        let back = decode_response(&bytes, cmd).unwrap();
        prop_assert_eq!(encode_response(&back), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn finite_requests_compare_equal(
        h in arb_header().prop_filter("finite rate", |h| h.sampling_rate_hz.is_finite()),
        e in vec(arb_event(), 0..5),
    ) {
        let r = Request::PutHeader(h);
        prop_assert_eq!(decode_request(&encode_request(&r)).unwrap(), r);
        let r = Request::PutEvents(e);
        prop_assert_eq!(decode_request(&encode_request(&r)).unwrap(), r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    #[test]
    fn arbitrary_bytes_never_crash(bytes in vec(any::<u8>(), 0..64), cmd in any::<u16>()) {
        let _ = decode_request(&bytes);
        let request = Command::from_code(cmd).unwrap_or(Command::GetDat);
        let _ = decode_response(&bytes, request);
        if let Ok((frame, used)) = split_frame(&bytes) {
            prop_assert!(used <= bytes.len());
            prop_assert_eq!(used, HEADER_LEN + frame.payload.len());
        }
        let _ = read_frame(&mut &bytes[..]);
    }

    #[test]
    fn valid_header_with_random_payload_never_crashes(
        cmd in prop::sample::select(vec![0x101u16, 0x102, 0x103, 0x104, 0x105, 0x201, 0x202, 0x203, 0x301, 0x402]),
        payload in vec(any::<u8>(), 0..48),
        request in prop::sample::select(vec![Command::PutHdr, Command::GetHdr, Command::GetDat, Command::GetEvt, Command::WaitDat]),
    ) {
        let mut bytes = vec![1, 0];
        bytes.extend_from_slice(&cmd.to_le_bytes());
        bytes.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&payload);
        let _ = decode_request(&bytes);
        let _ = decode_response(&bytes, request);
    }
}

#[test]
fn get_header_is_eight_bytes() {
    assert_eq!(encode_request(&Request::GetHeader), [0x01, 0x00, 0x01, 0x02, 0, 0, 0, 0]);
}

#[test]
fn declared_size_beyond_buffer_is_truncated() {
    let mut bytes = encode_request(&Request::GetData { begin: 1, end: 2 });
    bytes.pop();
    assert!(matches!(decode_request(&bytes), Err(DecodeError::Truncated { declared: 16, available: 15 })));
}

#[test]
fn trailing_frames_are_left_alone() {
    let mut bytes = encode_request(&Request::Flush);
    let second = encode_request(&Request::GetHeader);
    bytes.extend_from_slice(&second);
    let (frame, used) = split_frame(&bytes).unwrap();
    assert_eq!(frame.command, 0x301);
    assert_eq!(used, HEADER_LEN);
    assert_eq!(decode_request(&bytes[used..]).unwrap(), Request::GetHeader);
}

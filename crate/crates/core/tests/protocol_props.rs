use coe_core::numerics::Rng;
use coe_core::protocol::{
    intervals_to_frames, parse_response, serialize_response, CoeResponse, TimeInterval,
};
use proptest::prelude::*;

const WORDS: &[&str] = &[
    "at", "and", "then", "appears", "collide", "00:05", "12:59", "yes", "no", "3", "<", ">", "a-b", ";",
];

fn words(min: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), min..8).prop_map(|w| w.join(" "))
}

fn response() -> impl Strategy<Value = CoeResponse> {
    let anchors = prop::collection::vec((0u32..3000, 1u32..120), 0..6).prop_map(|v| {
        v.into_iter()
            .map(|(s, len)| TimeInterval::new(f64::from(s), f64::from((s + len).min(3599))).unwrap())
            .collect::<Vec<_>>()
    });
    (anchors, words(0), words(1)).prop_map(|(a, d, ans)| CoeResponse::new(a, &d, &ans))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn serialize_then_parse_is_identity(r in response()) {
        let text = serialize_response(&r).unwrap();
        prop_assert_eq!(parse_response(&text).unwrap(), r);
    }
}

proptest! {
    #[test]
    fn serialization_is_a_fixed_point(r in response(), pad in "[ \t\n]{0,3}") {
        let text = format!("{pad}{}{pad}", serialize_response(&r).unwrap())
            .replace("> ", &format!(">{pad} "))
            .replace("; ", &format!(";{pad}"));
        let once = serialize_response(&parse_response(&text).unwrap()).unwrap();
        let twice = serialize_response(&parse_response(&once).unwrap()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn arbitrary_strings_never_panic(s in "\\PC{0,200}") {
        let _ = parse_response(&s);
    }
}

const FRAGMENTS: &[&str] = &[
    "<Temporal Anchors>", "</Temporal Anchors>", "<Reasoning Draft>", "</Reasoning Draft>",
    "<Answer>", "</Answer>", "00:05", "-", ";", "99:99", "0:5", " ", "yes", "\u{00e9}", "<", "</", ":",
    "00:05-00:10", "59:59-00:00",
];

const SKELETON: &str = "<Temporal Anchors> 00:05-00:10; 00:45-00:50 </Temporal Anchors> \
<Reasoning Draft> entry at 00:05 and result at 00:45 </Reasoning Draft> <Answer> Yes </Answer>";

/// Splices random fragments and characters into a valid response.
fn mutate(rng: &mut Rng) -> String {
    let mut chars: Vec<char> = SKELETON.chars().collect();
    for _ in 0..rng.below(4) {
        let at = rng.below(chars.len() + 1);
        match rng.below(3) {
            0 => {
                let end = (at + 1 + rng.below(12)).min(chars.len());
                chars.drain(at.min(end)..end);
            }
            1 => {
                let frag: Vec<char> = FRAGMENTS[rng.below(FRAGMENTS.len())].chars().collect();
                chars.splice(at..at, frag);
            }
            _ => chars.insert(at, char::from_u32(rng.below(0x3000) as u32).unwrap_or('?')),
        }
    }
    chars.into_iter().collect()
}

#[test]
fn fuzzed_protocol_strings_never_panic() {
    let mut rng = Rng::new(2024);
    let mut parsed = 0;
    for i in 0..100_000 {
        let s = if i % 2 == 0 {
            mutate(&mut rng)
        } else {
            (0..rng.below(14))
                .map(|_| FRAGMENTS[rng.below(FRAGMENTS.len())])
                .collect()
        };
        if let Ok(r) = parse_response(&s) {
            parsed += 1;
            let _ = serialize_response(&r);
        }
    }
    // The corpus must reach the success path too, not only errors.
    assert!(parsed > 1000, "{parsed}");
}

#[test]
fn interval_frames_match_a_per_frame_sweep() {
    let mut rng = Rng::new(8);
    for _ in 0..1000 {
        let fps = [0.5, 1.0, 2.0, 3.0, 4.0][rng.below(5)];
        let n = 1 + rng.below(40);
        let ivs: Vec<TimeInterval> = (0..rng.below(4))
            .map(|_| {
                let s = rng.below(30) as f64 * 0.5;
                TimeInterval::new(s, s + 0.25 + rng.below(20) as f64 * 0.5).unwrap()
            })
            .collect();
        let got = intervals_to_frames(&ivs, fps, n);
        let want: Vec<usize> = (0..n)
            .filter(|&i| {
                let (a, b) = (i as f64 / fps, (i + 1) as f64 / fps);
                ivs.iter().any(|iv| a < iv.end_s() && iv.start_s() < b)
            })
            .collect();
        assert_eq!(got.indices(), want.as_slice());
    }
}

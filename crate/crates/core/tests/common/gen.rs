//! Random envelope generation shared by the property and oracle tests.

use chrono::{TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use ssc_core::envelope::{Body, Destination, Envelope, MessageKind, Profile, Sender};

const ALPHABET: &[char] = &[
    'a', 'b', 'z', 'A', 'Q', '0', '9', '-', '_', '.', ' ', '"', '\\', '/', '\n', '\t', '\r', '\u{0}', '\u{1f}',
    '\u{7f}', 'é', 'ß', '€', '漢', '😀', '\u{2028}', '\u{fffd}',
];

pub fn text<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    (0..len).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
}

pub fn envelope<R: Rng>(rng: &mut R) -> Envelope {
    let kind = *[MessageKind::Request, MessageKind::Response, MessageKind::Event, MessageKind::Fault]
        .choose(rng)
        .unwrap();
    let profile = *[Profile::Sync, Profile::AsyncEvent, Profile::AsyncProcess].choose(rng).unwrap();
    let correlation = if kind.requires_correlation() || rng.gen_bool(0.5) {
        Some(text(rng, 0, 24))
    } else {
        None
    };
    let millis = rng.gen_range(0i64..4_102_444_800_000);
    let payload_len = rng.gen_range(0..200);
    Envelope {
        envelope_id: uuid::Uuid::from_u128(rng.gen()).to_string(),
        created_at: Utc.timestamp_millis_opt(millis).unwrap(),
        sender: Sender::new(text(rng, 1, 16), text(rng, 1, 16)),
        destination: Destination::new(text(rng, 1, 16), text(rng, 1, 16)),
        profile,
        message_kind: kind,
        correlation_id: correlation,
        body: Body::new(text(rng, 0, 24), (0..payload_len).map(|_| rng.gen::<u8>()).collect::<Vec<u8>>()),
        security: None,
    }
}

//! Reference canonical encoder written without serde, used to cross-check
//! the library's byte layout.

use chrono::{Datelike, Timelike};
use ssc_core::envelope::Envelope;

const B64: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

pub fn base64(bytes: &[u8]) -> String {
    let mut out = String::new();
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        for i in 0..4 {
            if i <= chunk.len() {
                out.push(B64[((n >> (18 - 6 * i)) & 63) as usize] as char);
            } else {
                out.push('=');
            }
        }
    }
    out
}

pub fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\u{8}' => out.push_str("\\b"),
            '\u{c}' => out.push_str("\\f"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn field(out: &mut String, key: &str, raw_value: &str) {
    if !out.ends_with('{') {
        out.push(',');
    }
    out.push_str(&quote(key));
    out.push(':');
    out.push_str(raw_value);
}

pub fn canonical(e: &Envelope, with_security: bool) -> String {
    let t = e.created_at;
    let created = format!(
        "{:04}-{:02}-{:02}T{:02}:{:02}:{:02}.{:03}Z",
        t.year(),
        t.month(),
        t.day(),
        t.hour(),
        t.minute(),
        t.second(),
        t.nanosecond() / 1_000_000
    );

    let mut body = String::from("{");
    field(&mut body, "content_type", &quote(&e.body.content_type));
    field(&mut body, "payload", &quote(&base64(&e.body.payload)));
    body.push('}');

    let mut dest = String::from("{");
    field(&mut dest, "admin_id", &quote(&e.destination.admin_id));
    field(&mut dest, "service_id", &quote(&e.destination.service_id));
    dest.push('}');

    let mut sender = String::from("{");
    field(&mut sender, "admin_id", &quote(&e.sender.admin_id));
    field(&mut sender, "port_id", &quote(&e.sender.port_id));
    sender.push('}');

    let mut out = String::from("{");
    field(&mut out, "body", &body);
    field(
        &mut out,
        "correlation_id",
        &e.correlation_id.as_deref().map(quote).unwrap_or_else(|| "null".into()),
    );
    field(&mut out, "created_at", &quote(&created));
    field(&mut out, "destination", &dest);
    field(&mut out, "envelope_id", &quote(&e.envelope_id));
    field(&mut out, "message_kind", &quote(e.message_kind.as_str()));
    field(&mut out, "profile", &quote(e.profile.as_str()));
    if let (true, Some(s)) = (with_security, &e.security) {
        let mut sec = String::from("{");
        field(&mut sec, "algorithm", &quote(&s.algorithm));
        field(&mut sec, "key_id", &quote(&s.key_id));
        field(&mut sec, "signature", &quote(&base64(&s.signature)));
        field(&mut sec, "signer_admin_id", &quote(&s.signer_admin_id));
        sec.push('}');
        field(&mut out, "security", &sec);
    }
    field(&mut out, "sender", &sender);
    out.push('}');
    out
}

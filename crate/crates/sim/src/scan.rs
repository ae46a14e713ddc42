//! Byte scans for secrets in wire traffic and stored state. A secret
//! counts as present if its raw bytes or any common base64 spelling turn
//! up, or if a JSON string decodes to bytes that contain it.

use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE, URL_SAFE_NO_PAD};
use base64::Engine;

use crate::transport::Exchange;

pub fn spellings(secret: &[u8]) -> Vec<Vec<u8>> {
    vec![
        secret.to_vec(),
        URL_SAFE_NO_PAD.encode(secret).into_bytes(),
        URL_SAFE.encode(secret).into_bytes(),
        STANDARD.encode(secret).into_bytes(),
        STANDARD_NO_PAD.encode(secret).into_bytes(),
    ]
}

fn has(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn json_strings<'a>(v: &'a serde_json::Value, out: &mut Vec<&'a str>) {
    match v {
        serde_json::Value::String(s) => out.push(s),
        serde_json::Value::Array(a) => a.iter().for_each(|x| json_strings(x, out)),
        serde_json::Value::Object(m) => m.values().for_each(|x| json_strings(x, out)),
        _ => {}
    }
}

fn decodes_to_contain(hay: &[u8], secret: &[u8]) -> bool {
    let Ok(v) = serde_json::from_slice::<serde_json::Value>(hay) else {
        return false;
    };
    let mut strings = Vec::new();
    json_strings(&v, &mut strings);
    strings.iter().any(|s| {
        [URL_SAFE_NO_PAD.decode(s), URL_SAFE.decode(s), STANDARD.decode(s)]
            .into_iter()
            .flatten()
            .any(|raw| has(&raw, secret))
    })
}

pub fn contains_secret(hay: &[u8], secret: &[u8]) -> bool {
    spellings(secret).iter().any(|n| has(hay, n)) || decodes_to_contain(hay, secret)
}

/// Sequence numbers of exchanges that carry any of `secrets`.
pub fn leaking_exchanges<'a, S: AsRef<[u8]>>(
    exchanges: impl IntoIterator<Item = &'a Exchange>,
    secrets: &[S],
) -> Vec<u64> {
    exchanges
        .into_iter()
        .filter(|e| {
            secrets.iter().any(|s| {
                let s = s.as_ref();
                contains_secret(&e.bytes(), s)
                    || contains_secret(&e.request_body, s)
                    || contains_secret(&e.response_body, s)
            })
        })
        .map(|e| e.seq)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_each_spelling() {
        let secret = [0xfbu8, 0xff, 0x01, 0x02, 0x03, 0x04, 0x05];
        for s in spellings(&secret) {
            let mut hay = b"prefix ".to_vec();
            hay.extend_from_slice(&s);
            assert!(contains_secret(&hay, &secret));
        }
        assert!(!contains_secret(b"nothing here", &secret));
    }

    #[test]
    fn finds_secret_inside_a_larger_encoded_blob() {
        let secret = [9u8; 20];
        let mut blob = vec![1u8];
        blob.extend_from_slice(&secret);
        let body = serde_json::to_vec(&serde_json::json!({"x": URL_SAFE_NO_PAD.encode(&blob)})).unwrap();
        assert!(!has(&body, URL_SAFE_NO_PAD.encode(secret).as_bytes()));
        assert!(contains_secret(&body, &secret));
    }
}

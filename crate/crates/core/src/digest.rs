use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 (hex) of the JSON serialization of a resolved configuration.
pub fn config_digest<T: Serialize + ?Sized>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration serializes to JSON");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Cfg {
        k: usize,
        pyramid: String,
    }

    #[test]
    fn digest_tracks_content() {
        let a = config_digest(&Cfg { k: 16, pyramid: "1x1x1".into() });
        let b = config_digest(&Cfg { k: 16, pyramid: "1x1x1".into() });
        let c = config_digest(&Cfg { k: 17, pyramid: "1x1x1".into() });
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }
}

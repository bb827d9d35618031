use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Seeded generator on an independent stream, so that parallel consumers
/// (bootstrap resamples, per-patient work) stay reproducible.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Short content hash of a serialisable config, echoed into artifact headers.
pub(crate) fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialises");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

/// Descending by score, ascending by id on ties. NaN sorts last.
pub(crate) fn rank_desc<T: AsRef<str>>(items: &mut [(T, f64)]) {
    items.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or_else(|| a.1.is_nan().cmp(&b.1.is_nan()))
            .then_with(|| a.0.as_ref().cmp(b.0.as_ref()))
    });
}

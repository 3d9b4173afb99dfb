use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// A keyed, counter-based random stream.
///
/// A stream is identified by a root seed and a 64-bit key. Sub-streams are
/// derived by mixing a label into the key, so the randomness used for one
/// purpose (a sample index, a parameter tensor, a training step) never
/// depends on how much randomness was consumed elsewhere. Streams are plain
/// values; hand each thread its own derived stream rather than sharing one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    key: u64,
}

impl RngStream {
    pub fn new(seed: u64, key: u64) -> Self {
        Self { seed, key }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Sub-stream for a numeric label such as a row or step index.
    pub fn derive(&self, label: u64) -> Self {
        Self {
            seed: self.seed,
            key: splitmix64(self.key ^ splitmix64(label.wrapping_add(0x9E37_79B9_7F4A_7C15))),
        }
    }

    /// Sub-stream for a named purpose ("W0", "eval-ft", ...).
    pub fn named(&self, purpose: &str) -> Self {
        self.derive(fnv1a(purpose.as_bytes()))
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.key);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

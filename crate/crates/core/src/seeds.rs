//! Counter-based seed fan-out: one master seed yields independent stream
//! seeds through the splitmix64 finalizer.

#[derive(Debug, Clone)]
pub struct SeedStream {
    state: u64,
}

/// splitmix64 output function.
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self { state: master }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Seed number `k` of the stream, without advancing it.
    pub fn nth(master: u64, k: u64) -> u64 {
        mix(master.wrapping_add(GOLDEN.wrapping_mul(k + 1)))
    }

    /// An independent stream keyed by `label`.
    pub fn fork(master: u64, label: &str) -> Self {
        let h = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        Self::new(mix(master ^ h))
    }
}

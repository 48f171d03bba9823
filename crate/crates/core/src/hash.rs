//! 64-bit FNV-1a hashing, the single digest primitive used across the
//! pipeline: virtual-mode draws, artifact digests, and the frozen seed.

const FNV_OFFSET_BASIS: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// 64-bit FNV-1a over the input bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET_BASIS;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hex encoding of the FNV-1a digest, used for artifact manifests.
pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// Map bytes to a uniform fraction in [0, 1) via FNV-1a / 2^64.
pub fn hash_unit(bytes: &[u8]) -> f64 {
    fnv1a64(bytes) as f64 / 2f64.powi(64)
}

/// Content digest of the original skill instruction, frozen at pipeline
/// start and reused for every version and variant so that virtual-mode
/// draws are paired across versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrozenSeed(pub u64);

impl FrozenSeed {
    pub fn from_instruction(instruction: &str) -> Self {
        FrozenSeed(fnv1a64(instruction.as_bytes()))
    }

    /// Draw for one (task, criterion) pair. Depends only on the seed,
    /// the task id, and the criterion index, never on the current
    /// instruction text.
    pub fn draw(&self, task_id: &str, criterion_index: usize) -> f64 {
        let mut buf = Vec::with_capacity(16 + task_id.len() + 24);
        buf.extend_from_slice(format!("{:016x}", self.0).as_bytes());
        buf.push(0x1f);
        buf.extend_from_slice(task_id.as_bytes());
        buf.push(0x1f);
        buf.extend_from_slice(criterion_index.to_string().as_bytes());
        hash_unit(&buf)
    }

    pub fn to_hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

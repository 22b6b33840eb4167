//! Additive secret sharing over Z_2^32 and the fixed-point codec that moves
//! real-valued gradients into the ring.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::transport::{SumInstance, SumMode, SumTransport};

/// Identity of a protocol participant (or of a dedicated aggregator node).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParticipantId(pub u16);

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Vector of ring elements. Arithmetic wraps modulo 2^32.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct RingVec(Vec<u32>);

impl RingVec {
    pub fn new(elems: Vec<u32>) -> Self {
        RingVec(elems)
    }

    pub fn zeros(len: usize) -> Self {
        RingVec(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    /// Uniform vector drawn from `rng`.
    pub fn random<R: RngCore + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut v = vec![0u32; len];
        rng.fill(&mut v[..]);
        RingVec(v)
    }

    pub fn add_assign(&mut self, other: &RingVec) {
        assert_eq!(self.len(), other.len(), "ring vector length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = a.wrapping_add(*b);
        }
    }

    pub fn sub_assign(&mut self, other: &RingVec) {
        assert_eq!(self.len(), other.len(), "ring vector length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = a.wrapping_sub(*b);
        }
    }

    pub fn wrapping_add(&self, other: &RingVec) -> RingVec {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn wrapping_sub(&self, other: &RingVec) -> RingVec {
        let mut out = self.clone();
        out.sub_assign(other);
        out
    }

    /// Little-endian serialization, four bytes per element.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.len() * 4);
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 4 != 0 {
            return Err(Error::arg(format!(
                "ring payload of {} bytes is not a multiple of 4",
                bytes.len()
            )));
        }
        Ok(RingVec(
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ))
    }
}

impl From<Vec<u32>> for RingVec {
    fn from(v: Vec<u32>) -> Self {
        RingVec(v)
    }
}

/// Signed fixed-point mapping between reals and ring elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointCodec {
    frac_bits: u32,
    clip_bound: f64,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec {
            frac_bits: 16,
            clip_bound: 64.0,
        }
    }
}

impl FixedPointCodec {
    pub const MIN_FRAC_BITS: u32 = 8;
    pub const MAX_FRAC_BITS: u32 = 24;

    /// `clip_bound * 2^frac_bits` must stay below 2^31 so a clipped value
    /// never wraps on its own.
    pub fn new(frac_bits: u32, clip_bound: f64) -> Result<Self> {
        if !(Self::MIN_FRAC_BITS..=Self::MAX_FRAC_BITS).contains(&frac_bits) {
            return Err(Error::arg(format!(
                "frac_bits {frac_bits} outside [{}, {}]",
                Self::MIN_FRAC_BITS,
                Self::MAX_FRAC_BITS
            )));
        }
        if !(clip_bound.is_finite() && clip_bound > 0.0) {
            return Err(Error::arg(format!("clip_bound {clip_bound} must be positive")));
        }
        if clip_bound * 2f64.powi(frac_bits as i32) >= 2f64.powi(31) {
            return Err(Error::arg(format!(
                "clip_bound {clip_bound} overflows the signed range at {frac_bits} fractional bits"
            )));
        }
        Ok(FixedPointCodec {
            frac_bits,
            clip_bound,
        })
    }

    pub fn with_frac_bits(frac_bits: u32) -> Result<Self> {
        Self::new(frac_bits, 64.0)
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Largest number of addends whose worst-case sum cannot overflow.
    pub fn max_addends(&self) -> usize {
        let limit = 2f64.powi(31 - self.frac_bits as i32);
        (limit / self.clip_bound).ceil() as usize - 1
    }

    pub fn encode(&self, x: &[f64]) -> RingVec {
        self.encode_counted(x).0
    }

    /// Encodes and reports how many entries had to be clipped. Non-finite
    /// inputs encode as zero and count as clipped.
    pub fn encode_counted(&self, x: &[f64]) -> (RingVec, usize) {
        let scale = self.scale();
        let mut clipped = 0;
        let elems = x
            .iter()
            .map(|&v| {
                let v = if v.is_nan() {
                    clipped += 1;
                    0.0
                } else if v.abs() > self.clip_bound {
                    clipped += 1;
                    v.clamp(-self.clip_bound, self.clip_bound)
                } else {
                    v
                };
                let q = (v * scale).round_ties_even() as i64;
                q as i32 as u32
            })
            .collect();
        (RingVec(elems), clipped)
    }

    pub fn decode(&self, v: &RingVec) -> Vec<f64> {
        let scale = self.scale();
        v.0.iter().map(|&e| e as i32 as f64 / scale).collect()
    }
}

/// One sharing of a secret among an ordered recipient list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareSet {
    per_recipient: BTreeMap<ParticipantId, RingVec>,
    secret_len: usize,
}

impl ShareSet {
    pub fn secret_len(&self) -> usize {
        self.secret_len
    }

    pub fn get(&self, id: ParticipantId) -> Option<&RingVec> {
        self.per_recipient.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParticipantId, &RingVec)> {
        self.per_recipient.iter()
    }

    pub fn into_map(self) -> BTreeMap<ParticipantId, RingVec> {
        self.per_recipient
    }

    pub fn shares(&self) -> Vec<RingVec> {
        self.per_recipient.values().cloned().collect()
    }
}

/// Splits `secret` into `recipients.len()` additive shares.
///
/// The first `n - 1` recipients (in the order given) get uniform vectors that
/// depend only on `rng`; the last one absorbs `secret - sum(others)`.
pub fn share<R: RngCore + ?Sized>(
    secret: &RingVec,
    recipients: &[ParticipantId],
    rng: &mut R,
) -> Result<ShareSet> {
    let Some((&last, rest)) = recipients.split_last() else {
        return Err(Error::arg("share requires at least one recipient"));
    };
    let mut per_recipient = BTreeMap::new();
    let mut remainder = secret.clone();
    for &id in rest {
        let s = RingVec::random(secret.len(), rng);
        remainder.sub_assign(&s);
        if per_recipient.insert(id, s).is_some() {
            return Err(Error::arg(format!("duplicate recipient {id}")));
        }
    }
    if per_recipient.insert(last, remainder).is_some() {
        return Err(Error::arg(format!("duplicate recipient {last}")));
    }
    Ok(ShareSet {
        per_recipient,
        secret_len: secret.len(),
    })
}

/// Element-wise ring sum of all shares.
pub fn reconstruct(shares: &[RingVec]) -> Result<RingVec> {
    let Some(first) = shares.first() else {
        return Err(Error::arg("reconstruct requires at least one share"));
    };
    let mut acc = first.clone();
    for s in &shares[1..] {
        if s.len() != acc.len() {
            return Err(Error::shape("reconstruct", acc.len(), s.len()));
        }
        acc.add_assign(s);
    }
    Ok(acc)
}

/// Encodes each participant's vector, runs one secure-sum exchange among all
/// of them, and decodes the sum. Every participant receives the same result.
pub fn secure_sum(
    local_inputs: &BTreeMap<ParticipantId, Vec<f64>>,
    codec: &FixedPointCodec,
    session: &mut dyn SumTransport,
) -> Result<Vec<f64>> {
    let Some(dim) = local_inputs.values().next().map(Vec::len) else {
        return Err(Error::arg("secure_sum needs at least one participant"));
    };
    let mut inputs = Vec::with_capacity(local_inputs.len());
    for (&id, x) in local_inputs {
        if x.len() != dim {
            return Err(Error::shape("secure_sum", dim, x.len()));
        }
        inputs.push((id, codec.encode(x)));
    }
    let delivery: Vec<ParticipantId> = local_inputs.keys().copied().collect();
    let instance = SumInstance {
        layer_tag: 0,
        group_tag: 0,
        mode: SumMode::Secure,
        inputs,
        delivery,
    };
    let out = session.exchange(vec![instance])?;
    let delivered = &out[0].delivered;
    let mut values = delivered.values();
    let first = values.next().expect("delivery set is nonempty");
    debug_assert!(values.all(|v| v == first));
    Ok(codec.decode(first))
}

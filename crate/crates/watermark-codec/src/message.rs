use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CodecError;

/// An L-bit binary watermark message.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self, CodecError> {
        if bits.is_empty() {
            return Err(CodecError::Invalid("message needs at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(CodecError::Invalid(format!("bit value {b} is not 0 or 1")));
        }
        Ok(Message { bits })
    }

    /// Parses a string of `0` and `1` characters.
    pub fn from_bitstring(s: &str) -> Result<Self, CodecError> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(CodecError::Invalid(format!("bad bit character {other:?}"))),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        Message::new(bits)
    }

    /// The `index`-th message in lexicographic order of length `len`, with
    /// bit 0 most significant.
    pub fn from_index(index: u64, len: usize) -> Result<Self, CodecError> {
        if len == 0 || len > 63 || index >= 1u64 << len {
            return Err(CodecError::Invalid(format!("index {index} out of range for {len} bits")));
        }
        Message::new((0..len).map(|i| ((index >> (len - 1 - i)) & 1) as u8).collect())
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn complement(&self) -> Message {
        Message {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }
}

/// A message relaxed to `[0, 1]^L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedMessage {
    values: Vec<f64>,
}

impl RelaxedMessage {
    pub fn new(values: Vec<f64>) -> Result<Self, CodecError> {
        if values.is_empty() {
            return Err(CodecError::Invalid("message needs at least one value".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CodecError::Invalid(format!("relaxed value {v} outside [0, 1]")));
        }
        Ok(RelaxedMessage { values })
    }

    /// Projects arbitrary reals onto the unit box.
    pub fn projected(values: Vec<f64>) -> Self {
        RelaxedMessage {
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rounds each element to the nearest bit; exactly 0.5 rounds up.
    pub fn round(&self) -> Message {
        Message {
            bits: self.values.iter().map(|&v| u8::from(v >= 0.5)).collect(),
        }
    }
}

impl From<&Message> for RelaxedMessage {
    fn from(m: &Message) -> Self {
        RelaxedMessage { values: m.to_f64() }
    }
}

/// Draws `len` i.i.d. uniform bits from a stream seeded by `seed`.
pub fn random_message(len: usize, seed: u64) -> Result<Message, CodecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_message_from(len, &mut rng)
}

pub fn random_message_from<R: Rng>(len: usize, rng: &mut R) -> Result<Message, CodecError> {
    Message::new((0..len).map(|_| u8::from(rng.random::<bool>())).collect())
}

/// Fraction of positions where the two messages agree.
pub fn bit_accuracy(predicted: &Message, truth: &Message) -> Result<f64, CodecError> {
    if predicted.len() != truth.len() {
        return Err(CodecError::Invalid(format!(
            "message lengths differ: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let matches = predicted.bits.iter().zip(&truth.bits).filter(|(a, b)| a == b).count();
    Ok(matches as f64 / truth.len() as f64)
}

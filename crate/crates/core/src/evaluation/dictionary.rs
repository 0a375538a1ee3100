//! Weight dictionary shared across candidates.
//!
//! Trained tensors are stored per `(layer index, op kind, filter width,
//! activation)`; channel counts are deliberately not part of the key, so a
//! stored tensor is spliced or padded onto whatever shape the next candidate
//! needs. At each step boundary the batch's contributions are merged and a key
//! keeps the tensors of its most accurate contributor.

use crate::arch::{Activation, OpKind};
use crate::codec::{decode_f64s, encode_f64s};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DictKey {
    pub layer_index: usize,
    pub op_kind: OpKind,
    pub filter_width: u32,
    pub activation: Activation,
}

/// A dense tensor; serialized as its shape plus base64 of little-endian f64s.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensorWire {
    shape: Vec<usize>,
    data: String,
}

impl Serialize for StoredTensor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        StoredTensorWire { shape: self.shape.clone(), data: encode_f64s(&self.data) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for StoredTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let wire = StoredTensorWire::deserialize(d)?;
        let data = decode_f64s(&wire.data).map_err(D::Error::custom)?;
        if data.len() != wire.shape.iter().product::<usize>() {
            return Err(D::Error::custom(format!("tensor payload does not match shape {:?}", wire.shape)));
        }
        Ok(StoredTensor { shape: wire.shape, data })
    }
}

pub type RoleTensors = BTreeMap<String, StoredTensor>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictEntry {
    pub key: DictKey,
    pub tensors: RoleTensors,
    pub accuracy: f64,
    /// Step boundary at which the entry was stored.
    pub step: u64,
}

/// Everything one trained candidate offers to the dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub tensors: BTreeMap<DictKey, RoleTensors>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<DictEntry>", from = "Vec<DictEntry>")]
pub struct WeightDictionary {
    pub entries: BTreeMap<DictKey, DictEntry>,
}

impl From<WeightDictionary> for Vec<DictEntry> {
    fn from(d: WeightDictionary) -> Self {
        d.entries.into_values().collect()
    }
}

impl From<Vec<DictEntry>> for WeightDictionary {
    fn from(v: Vec<DictEntry>) -> Self {
        WeightDictionary { entries: v.into_iter().map(|e| (e.key, e)).collect() }
    }
}

impl WeightDictionary {
    pub fn get(&self, key: &DictKey) -> Option<&DictEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Merges one step's contributions. A key takes a contributor's tensors only
/// when its accuracy is strictly higher than the stored one, so ties keep the
/// incumbent and, within a batch, the earlier contributor.
pub fn merge_dictionary(dict: &mut WeightDictionary, batch: &[Contribution], step: u64) {
    for c in batch {
        if !c.accuracy.is_finite() {
            continue;
        }
        for (key, tensors) in &c.tensors {
            let replace = dict.entries.get(key).is_none_or(|e| c.accuracy > e.accuracy);
            if replace {
                dict.entries.insert(*key, DictEntry { key: *key, tensors: tensors.clone(), accuracy: c.accuracy, step });
            }
        }
    }
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum SpliceError {
    #[error("rank mismatch: stored {stored}, target {target}")]
    Rank { stored: usize, target: usize },
    #[error("fill holds {got} values, target needs {want}")]
    Fill { got: usize, want: usize },
}

/// Copies the overlap of `stored` into `fill`, which already holds fresh
/// values of `target` shape. Axes flagged in `centered` align on their
/// centers (kernel windows), the rest on their first index (channels).
pub fn splice_or_pad(
    stored: &StoredTensor,
    target: &[usize],
    centered: &[bool],
    mut fill: Vec<f64>,
) -> Result<Vec<f64>, SpliceError> {
    if stored.shape.len() != target.len() {
        return Err(SpliceError::Rank { stored: stored.shape.len(), target: target.len() });
    }
    let want: usize = target.iter().product();
    if fill.len() != want {
        return Err(SpliceError::Fill { got: fill.len(), want });
    }
    if stored.shape == target {
        return Ok(stored.data.clone());
    }
    // per axis: (source offset, destination offset, overlap length)
    let spans: Vec<(usize, usize, usize)> = stored
        .shape
        .iter()
        .zip(target)
        .enumerate()
        .map(|(i, (&s, &t))| {
            let len = s.min(t);
            if centered.get(i).copied().unwrap_or(false) {
                ((s - len) / 2, (t - len) / 2, len)
            } else {
                (0, 0, len)
            }
        })
        .collect();
    if spans.iter().any(|&(_, _, len)| len == 0) {
        return Ok(fill);
    }
    let rank = target.len();
    let mut idx = vec![0usize; rank];
    loop {
        let (mut src, mut dst) = (0, 0);
        for a in 0..rank {
            src = src * stored.shape[a] + spans[a].0 + idx[a];
            dst = dst * target[a] + spans[a].1 + idx[a];
        }
        fill[dst] = stored.data[src];
        let mut a = rank;
        loop {
            if a == 0 {
                return Ok(fill);
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < spans[a].2 {
                break;
            }
            idx[a] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: usize) -> DictKey {
        DictKey { layer_index: i, op_kind: OpKind::Conv2d, filter_width: 3, activation: Activation::Relu }
    }

    fn tensor(shape: &[usize], start: f64) -> StoredTensor {
        let n = shape.iter().product::<usize>();
        StoredTensor { shape: shape.to_vec(), data: (0..n).map(|i| start + i as f64).collect() }
    }

    fn contribution(keys: &[usize], value: f64, accuracy: f64) -> Contribution {
        let tensors = keys
            .iter()
            .map(|&k| (key(k), BTreeMap::from([("weight".to_string(), tensor(&[2], value))])))
            .collect();
        Contribution { tensors, accuracy }
    }

    #[test]
    fn identical_shape_is_bit_copy() {
        let t = StoredTensor { shape: vec![2, 2], data: vec![0.1, -0.0, f64::MIN_POSITIVE, 3.0] };
        let out = splice_or_pad(&t, &[2, 2], &[false, false], vec![9.0; 4]).unwrap();
        assert!(out.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn wider_output_copies_leading_channels() {
        // [out, in, kh, kw]: 32 stored output channels into 64
        let t = tensor(&[32, 16, 3, 3], 0.0);
        let out = splice_or_pad(&t, &[64, 16, 3, 3], &[false, false, true, true], vec![-1.0; 64 * 144]).unwrap();
        assert_eq!(&out[..32 * 144], &t.data[..]);
        assert!(out[32 * 144..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn smaller_kernel_takes_center_window() {
        let t = tensor(&[1, 1, 5, 5], 0.0);
        let out = splice_or_pad(&t, &[1, 1, 3, 3], &[false, false, true, true], vec![0.0; 9]).unwrap();
        assert_eq!(out, vec![6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);
        let back = splice_or_pad(&StoredTensor { shape: vec![1, 1, 3, 3], data: out }, &[1, 1, 5, 5], &[false, false, true, true], vec![0.0; 25]).unwrap();
        assert_eq!(back[12], 12.0);
        assert_eq!(back[0], 0.0);
    }

    #[test]
    fn rank_mismatch_is_error() {
        let t = tensor(&[3, 3], 0.0);
        assert_eq!(splice_or_pad(&t, &[3, 3, 1], &[], vec![0.0; 9]), Err(SpliceError::Rank { stored: 2, target: 3 }));
    }

    #[test]
    fn merge_prefers_higher_accuracy_and_keeps_ties() {
        let mut d = WeightDictionary::default();
        merge_dictionary(&mut d, &[contribution(&[0], 1.0, 0.7)], 0);
        assert_eq!(d.get(&key(0)).unwrap().tensors["weight"].data, vec![1.0, 2.0]);
        merge_dictionary(&mut d, &[contribution(&[0, 1], 5.0, 0.9), contribution(&[0], 7.0, 0.9)], 1);
        let e = d.get(&key(0)).unwrap();
        assert_eq!((e.tensors["weight"].data[0], e.accuracy, e.step), (5.0, 0.9, 1));
        merge_dictionary(&mut d, &[contribution(&[0], 8.0, 0.9)], 2);
        assert_eq!(d.get(&key(0)).unwrap().tensors["weight"].data[0], 5.0);
        merge_dictionary(&mut d, &[contribution(&[1], 9.0, 0.2)], 3);
        assert_eq!(d.get(&key(1)).unwrap().accuracy, 0.9);
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let mut d = WeightDictionary::default();
        let mut c = contribution(&[2, 4], 0.0, 0.5);
        c.tensors.get_mut(&key(2)).unwrap().get_mut("weight").unwrap().data = vec![0.1 + 0.2, -1e-300];
        merge_dictionary(&mut d, &[c], 7);
        let text = serde_json::to_string(&d).unwrap();
        let back: WeightDictionary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.get(&key(2)).unwrap().tensors["weight"].data[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    proptest::proptest! {
        #[test]
        fn accuracy_never_decreases(accs in proptest::collection::vec((0usize..4, 0.0f64..1.0), 1..40)) {
            let mut d = WeightDictionary::default();
            let mut seen: BTreeMap<DictKey, f64> = BTreeMap::new();
            for (step, chunk) in accs.chunks(3).enumerate() {
                let batch: Vec<Contribution> = chunk.iter().map(|&(k, a)| contribution(&[k], a, a)).collect();
                merge_dictionary(&mut d, &batch, step as u64);
                for (k, e) in &d.entries {
                    let prev = seen.insert(*k, e.accuracy).unwrap_or(f64::NEG_INFINITY);
                    proptest::prop_assert!(e.accuracy >= prev);
                }
            }
        }
    }
}

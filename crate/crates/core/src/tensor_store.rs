//! Bit-exact checkpoint container.
//!
//! File layout: magic `MMRG`, format version (u32 LE), index length
//! (u64 LE), meta length (u64 LE), a UTF-8 index with one
//! `name\tf32\tdims\toffset\tlength` line per tensor sorted by name, a
//! block of `#meta\tkey\tvalue` lines, then raw little-endian f32
//! payloads at 64-byte-aligned absolute file offsets. The file ends
//! exactly where the last payload does, so any truncation or trailing
//! garbage is detectable. Identical maps always serialize to identical
//! bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMRG";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 64;
const HEADER_LEN: u64 = 24;

/// Values accepted in the `stage` meta key. The first six mark model
/// checkpoints along the pipeline; the rest reuse the container for
/// other artifacts (clip corpora, sampled videos, blended weights).
pub const STAGES: &[&str] = &[
    "pretrained",
    "sft",
    "dyn",
    "dyn_star",
    "con_star",
    "isolated_delta",
    "corpus",
    "sample",
    "blend",
];

/// Dense row-major f32 tensor. Construction rejects non-finite values,
/// so a `Tensor` in hand is always safe to serialize.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid("tensor shape has a zero dimension".into()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Invalid(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite value {bad} in tensor")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named tensor collection plus free-form string metadata.
///
/// Iteration follows lexicographic name order, matching the on-disk
/// index, so per-tensor walks are deterministic everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap {
    entries: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl TensorMap {
    /// An empty map at the given lifecycle stage.
    pub fn new(stage: &str) -> Result<Self> {
        check_stage(stage)?;
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), stage.to_string());
        Ok(TensorMap {
            entries: BTreeMap::new(),
            meta,
        })
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        check_name(name)?;
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate tensor name {name:?}")));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stage(&self) -> &str {
        self.meta.get("stage").map(String::as_str).unwrap_or("")
    }

    pub fn set_stage(&mut self, stage: &str) -> Result<()> {
        check_stage(stage)?;
        self.meta.insert("stage".into(), stage.into());
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "stage" {
            return self.set_stage(value);
        }
        check_meta(key, value)?;
        self.meta.insert(key.into(), value.into());
        Ok(())
    }
}

/// Bit-level equality: same names, shapes, meta, and f32 bit patterns.
/// Stricter than `==`, which treats -0.0 and 0.0 as equal.
pub fn bitwise_equal(a: &TensorMap, b: &TensorMap) -> bool {
    if a.meta != b.meta || a.entries.len() != b.entries.len() {
        return false;
    }
    a.entries.iter().zip(b.entries.iter()).all(|((an, at), (bn, bt))| {
        an == bn
            && at.shape == bt.shape
            && at
                .data
                .iter()
                .zip(bt.data.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

fn check_stage(stage: &str) -> Result<()> {
    if STAGES.contains(&stage) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "unknown stage {stage:?}; expected one of {STAGES:?}"
        )))
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty()
        || !name.is_ascii()
        || name.bytes().any(|b| b.is_ascii_control() || b == b' ')
    {
        return Err(Error::Invalid(format!(
            "tensor name {name:?} must be non-empty printable ASCII without spaces"
        )));
    }
    Ok(())
}

fn check_meta(key: &str, value: &str) -> Result<()> {
    let clean = |s: &str| !s.chars().any(|c| c.is_control());
    if key.is_empty() || !clean(key) || !clean(value) {
        return Err(Error::Invalid(format!(
            "meta entry {key:?}={value:?} must be non-empty key and control-free text"
        )));
    }
    Ok(())
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

/// Serialize a map to container bytes. Pure function of the map.
pub fn to_bytes(map: &TensorMap) -> Result<Vec<u8>> {
    check_stage(map.stage())?;
    for (k, v) in &map.meta {
        check_meta(k, v)?;
    }

    let meta_text: String = map
        .meta
        .iter()
        .map(|(k, v)| format!("#meta\t{k}\t{v}\n"))
        .collect();

    // Offsets are absolute, so the index depends on its own length;
    // iterate until the length stabilizes (offset digit counts grow
    // monotonically, so this converges in a couple of rounds).
    let mut index_len = 0u64;
    let (index_text, offsets) = loop {
        let payload_base = HEADER_LEN + index_len + meta_text.len() as u64;
        let mut cursor = payload_base;
        let mut text = String::new();
        let mut offsets = Vec::with_capacity(map.len());
        for (name, t) in &map.entries {
            let offset = align_up(cursor);
            let bytes = 4 * t.numel() as u64;
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            text += &format!("{name}\tf32\t{}\t{offset}\t{bytes}\n", dims.join(","));
            offsets.push(offset);
            cursor = offset + bytes;
        }
        if text.len() as u64 == index_len {
            break (text, offsets);
        }
        index_len = text.len() as u64;
    };

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(index_text.len() as u64).to_le_bytes());
    out.extend_from_slice(&(meta_text.len() as u64).to_le_bytes());
    out.extend_from_slice(index_text.as_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    for ((_, t), offset) in map.entries.iter().zip(offsets) {
        out.resize(offset as usize, 0);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse container bytes back into a map, validating every structural
/// claim the index makes before touching payload data.
pub fn from_bytes(bytes: &[u8]) -> Result<TensorMap> {
    let fail = |msg: String| Err(Error::Format(msg));
    if bytes.len() < HEADER_LEN as usize {
        return fail("file shorter than header".into());
    }
    if &bytes[0..4] != MAGIC {
        return fail("bad magic bytes".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return fail(format!("unsupported format version {version}"));
    }
    let index_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let index_end = HEADER_LEN
        .checked_add(index_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Format("index extends past end of file".into()))?;
    let meta_end = index_end
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Format("meta block extends past end of file".into()))?;

    let index_text = std::str::from_utf8(&bytes[HEADER_LEN as usize..index_end as usize])
        .map_err(|_| Error::Format("index is not UTF-8".into()))?;

    struct Record {
        name: String,
        shape: Vec<usize>,
        offset: u64,
        length: u64,
    }

    let mut records: Vec<Record> = Vec::new();
    for line in index_text.split_terminator('\n') {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, dims, offset, length] = fields[..] else {
            return fail(format!("index line has {} fields, expected 5", fields.len()));
        };
        check_name(name)?;
        if dtype != "f32" {
            return fail(format!("unsupported dtype {dtype:?}"));
        }
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| {
                    d.parse::<usize>()
                        .ok()
                        .filter(|&d| d > 0)
                        .ok_or_else(|| Error::Format(format!("bad dimension {d:?}")))
                })
                .collect::<Result<_>>()?
        };
        let offset: u64 = offset
            .parse()
            .map_err(|_| Error::Format(format!("bad offset {offset:?}")))?;
        let length: u64 = length
            .parse()
            .map_err(|_| Error::Format(format!("bad length {length:?}")))?;
        if let Some(prev) = records.last() {
            if prev.name >= name.to_string() {
                return fail(if prev.name == name {
                    format!("duplicate tensor name {name:?} in index")
                } else {
                    "index is not sorted by name".to_string()
                });
            }
        }
        records.push(Record {
            name: name.to_string(),
            shape,
            offset,
            length,
        });
    }

    // Structural payload checks: expected size, alignment, ordering,
    // and bounds. A truncated file fails the bounds check.
    let mut prev_end = meta_end;
    for r in &records {
        let numel: usize = r.shape.iter().product();
        if r.length != 4 * numel as u64 {
            return fail(format!(
                "tensor {} declares {} bytes but shape {:?} implies {}",
                r.name,
                r.length,
                r.shape,
                4 * numel
            ));
        }
        if r.offset % ALIGN != 0 {
            return fail(format!("tensor {} payload is not {ALIGN}-byte aligned", r.name));
        }
        if r.offset < prev_end {
            return fail(format!("tensor {} payload overlaps earlier data", r.name));
        }
        let end = r
            .offset
            .checked_add(r.length)
            .ok_or_else(|| Error::Format("payload range overflows".into()))?;
        if end > bytes.len() as u64 {
            return fail(format!("payload shorter than index (tensor {})", r.name));
        }
        if bytes[prev_end as usize..r.offset as usize]
            .iter()
            .any(|&b| b != 0)
        {
            return fail("garbage between payloads".into());
        }
        prev_end = end;
    }

    // The file must end exactly where the last payload (or the meta
    // block, for an empty map) does.
    if bytes.len() as u64 != prev_end {
        return fail(format!(
            "file is {} bytes but contents end at {prev_end}",
            bytes.len()
        ));
    }

    let meta_text = std::str::from_utf8(&bytes[index_end as usize..meta_end as usize])
        .map_err(|_| Error::Format("meta block is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.split_terminator('\n') {
        let fields: Vec<&str> = line.split('\t').collect();
        let ["#meta", key, value] = fields[..] else {
            return fail(format!("bad meta line {line:?}"));
        };
        check_meta(key, value)?;
        if meta.insert(key.to_string(), value.to_string()).is_some() {
            return fail(format!("duplicate meta key {key:?}"));
        }
    }

    let stage = meta
        .get("stage")
        .ok_or_else(|| Error::Format("missing stage meta".into()))?;
    check_stage(stage).map_err(|_| Error::Format(format!("unknown stage {stage:?}")))?;

    let mut map = TensorMap {
        entries: BTreeMap::new(),
        meta,
    };
    for r in records {
        let start = r.offset as usize;
        let payload = &bytes[start..start + r.length as usize];
        let mut data = Vec::with_capacity(payload.len() / 4);
        for chunk in payload.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return fail(format!("non-finite payload value in tensor {}", r.name));
            }
            data.push(v);
        }
        let tensor = Tensor::new(r.shape, data)
            .map_err(|e| Error::Format(format!("tensor {}: {e}", r.name)))?;
        map.entries.insert(r.name, tensor);
    }
    Ok(map)
}

pub fn save_checkpoint(map: &TensorMap, path: &Path) -> Result<()> {
    let bytes = to_bytes(map)?;
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    from_bytes(&bytes)
}

/// Tensor-name split between weights shared with the base model and
/// adapter weights that exist only in the fine-tuned model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub adapter_names: BTreeSet<String>,
    pub shared_names: BTreeSet<String>,
}

/// Split `a`'s names against base `b`: names in both (equal shapes) are
/// shared, names only in `a` are adapter additions, and names only in
/// `b` are an error (a pretrained tensor may never vanish).
pub fn validate_compatibility(a: &TensorMap, b: &TensorMap) -> Result<ParamPartition> {
    let mut shared = BTreeSet::new();
    let mut adapter = BTreeSet::new();
    for (name, ta) in a.iter() {
        match b.get(name) {
            Some(tb) if tb.shape() == ta.shape() => {
                shared.insert(name.to_string());
            }
            Some(tb) => {
                return Err(Error::Incompatible(format!(
                    "tensor {name} has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            None => {
                adapter.insert(name.to_string());
            }
        }
    }
    if let Some(missing) = b.names().find(|n| a.get(n).is_none()) {
        return Err(Error::Incompatible(format!(
            "tensor {missing} exists in the base map only"
        )));
    }
    Ok(ParamPartition {
        adapter_names: adapter,
        shared_names: shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_map() -> TensorMap {
        let mut m = TensorMap::new("pretrained").unwrap();
        m.insert("b.weight", Tensor::new(vec![2, 2], vec![0.5, -0.5, 1.5, -2.5]).unwrap())
            .unwrap();
        m.insert("a.bias", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        m.set_meta("id", "demo").unwrap();
        m
    }

    #[test]
    fn tensor_rejects_bad_construction() {
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn empty_map_round_trips() {
        let m = TensorMap::new("sft").unwrap();
        let loaded = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(m, loaded);
        assert!(loaded.is_empty());
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = demo_map();
        let loaded = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert!(bitwise_equal(&m, &loaded));
    }

    #[test]
    fn negative_zero_and_denormals_survive() {
        let mut m = TensorMap::new("sample").unwrap();
        let vals = vec![-0.0, f32::MIN_POSITIVE / 2.0, f32::MAX, -f32::MAX];
        m.insert("edge", Tensor::new(vec![4], vals.clone()).unwrap())
            .unwrap();
        let loaded = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        let got = loaded.get("edge").unwrap().data();
        for (a, b) in vals.iter().zip(got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn save_is_deterministic() {
        let m = demo_map();
        assert_eq!(to_bytes(&m).unwrap(), to_bytes(&m).unwrap());
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.mmrg");
        let m = demo_map();
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(bitwise_equal(&m, &loaded));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = to_bytes(&demo_map()).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        let err = from_bytes(cut).unwrap_err().to_string();
        assert!(err.contains("payload shorter than index"), "{err}");
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let good = to_bytes(&demo_map()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(from_bytes(&bad_version).is_err());

        let mut bad_len = good.clone();
        bad_len[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(from_bytes(&bad_len).is_err());

        assert!(from_bytes(&good[..10]).is_err());
    }

    #[test]
    fn duplicate_and_unsorted_index_are_rejected() {
        let m = demo_map();
        let bytes = to_bytes(&m).unwrap();
        let index_len =
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let index = std::str::from_utf8(&bytes[24..24 + index_len]).unwrap();
        let lines: Vec<&str> = index.split_terminator('\n').collect();
        assert_eq!(lines.len(), 2);

        // Same total index length, names swapped out of order.
        let swapped = format!("{}\n{}\n", lines[1], lines[0]);
        assert_eq!(swapped.len(), index_len);
        let mut bad = bytes.clone();
        bad[24..24 + index_len].copy_from_slice(swapped.as_bytes());
        let err = from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("sorted"), "{err}");
    }

    #[test]
    fn nan_payload_is_rejected() {
        let mut m = TensorMap::new("pretrained").unwrap();
        m.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut bytes = to_bytes(&m).unwrap();
        let offset = bytes.len() - 8;
        bytes[offset..offset + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }

    #[test]
    fn stage_meta_is_mandatory() {
        assert!(TensorMap::new("nonsense").is_err());
        let mut m = demo_map();
        assert!(m.set_stage("bogus").is_err());
        assert!(m.set_stage("dyn_star").is_ok());
    }

    #[test]
    fn meta_strings_reject_control_chars() {
        let mut m = demo_map();
        assert!(m.set_meta("key", "line\nbreak").is_err());
        assert!(m.set_meta("ta\tb", "v").is_err());
        assert!(m.set_meta("", "v").is_err());
        assert!(m.set_meta("alpha", "0.5").is_ok());
    }

    #[test]
    fn partition_identical_maps() {
        let m = demo_map();
        let p = validate_compatibility(&m, &m).unwrap();
        assert!(p.adapter_names.is_empty());
        assert_eq!(p.shared_names.len(), 2);
    }

    #[test]
    fn partition_extra_tensor_is_adapter() {
        let base = demo_map();
        let mut ft = base.clone();
        ft.insert("adapter.q", Tensor::new(vec![1], vec![0.1]).unwrap())
            .unwrap();
        let p = validate_compatibility(&ft, &base).unwrap();
        assert_eq!(p.adapter_names.iter().collect::<Vec<_>>(), vec!["adapter.q"]);
        assert_eq!(p.shared_names.len(), 2);
    }

    #[test]
    fn partition_rejects_mismatch() {
        let base = demo_map();
        let mut ft = TensorMap::new("sft").unwrap();
        ft.insert("a.bias", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        ft.insert("b.weight", base.get("b.weight").unwrap().clone())
            .unwrap();
        assert!(validate_compatibility(&ft, &base).is_err());

        // tensor present only in the base map
        let mut missing = TensorMap::new("sft").unwrap();
        missing
            .insert("a.bias", base.get("a.bias").unwrap().clone())
            .unwrap();
        assert!(validate_compatibility(&missing, &base).is_err());
    }
}

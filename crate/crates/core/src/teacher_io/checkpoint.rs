//! `APMC` checkpoints.
//!
//! Layout (little-endian): magic `APMC`, `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name and an embedded `APMT` tensor.
//!
//! Entry names, in file order:
//! - every parameter tensor (`conv.kernel`, `decoder.{i}.weight`,
//!   `decoder.{i}.bias`, `head.weight`, `head.bias`, `rgb.{i}.weight`,
//!   `rgb.{i}.bias`)
//! - `adam.m.<param>` for each parameter, then `adam.v.<param>`
//! - `step`: the optimizer step as four little-endian 16-bit limbs, stored as
//!   a length-4 tensor (each limb is exact in `f32`).

use std::collections::HashMap;
use std::path::Path;

use super::tensor_file::{decode_tensor, encode_tensor, read_file, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::grad::AdamState;
use crate::net::{ApmParams, ModelSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"APMC";
pub const STEP_ENTRY: &str = "step";

fn step_tensor(step: u64) -> Tensor {
    Tensor::vector((0..4).map(|k| ((step >> (16 * k)) & 0xffff) as f64).collect())
}

fn step_from_tensor(t: &Tensor) -> Result<u64> {
    if t.shape() != [4] {
        return Err(Error::IncompatibleCheckpoint(format!(
            "`step` has shape {:?}, expected [4]",
            t.shape()
        )));
    }
    let mut step = 0u64;
    for (k, &v) in t.data().iter().enumerate() {
        if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::IncompatibleCheckpoint(format!("`step` limb {v} is not a u16")));
        }
        step |= (v as u64) << (16 * k);
    }
    Ok(step)
}

/// Entry names of a checkpoint for `params`, in file order.
pub fn checkpoint_names(params: &ApmParams) -> Vec<String> {
    let names = params.names();
    let mut out = names.clone();
    out.extend(names.iter().map(|n| format!("adam.m.{n}")));
    out.extend(names.iter().map(|n| format!("adam.v.{n}")));
    out.push(STEP_ENTRY.to_string());
    out
}

pub fn checkpoint_to_bytes(params: &ApmParams, adam: &AdamState, step: u64) -> Result<Vec<u8>> {
    if !params.congruent(&adam.m) || !params.congruent(&adam.v) {
        return Err(Error::Config("optimizer state does not match parameters".into()));
    }
    let step_t = step_tensor(step);
    let tensors: Vec<&Tensor> = params
        .tensors()
        .into_iter()
        .chain(adam.m.tensors())
        .chain(adam.v.tensors())
        .chain(std::iter::once(&step_t))
        .collect();
    let names = checkpoint_names(params);
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out)?;
    }
    Ok(out)
}

/// Raw `(name, tensor)` entries in file order.
pub fn checkpoint_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic("checkpoint", CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::IncompatibleCheckpoint("entry name is not UTF-8".into()))?
            .to_string();
        let t = decode_tensor(&mut r)?;
        entries.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} trailing bytes after the last entry",
            r.remaining()
        )));
    }
    Ok(entries)
}

/// Restores parameters, optimizer state and step for a model of `spec`.
pub fn checkpoint_from_bytes(bytes: &[u8], spec: &ModelSpec) -> Result<(ApmParams, AdamState, u64)> {
    let mut entries: HashMap<String, Tensor> = HashMap::new();
    for (name, t) in checkpoint_entries(bytes)? {
        if entries.insert(name.clone(), t).is_some() {
            return Err(Error::IncompatibleCheckpoint(format!("duplicate entry `{name}`")));
        }
    }
    let mut params = ApmParams::zeros(spec);
    let mut adam = AdamState::new(&params);
    let names = params.names();
    let mut take = |name: &str, slot: &mut Tensor| -> Result<()> {
        let t = entries
            .remove(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing entry `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    };
    for (n, slot) in names.iter().zip(params.tensors_mut()) {
        take(n, slot)?;
    }
    for (n, slot) in names.iter().zip(adam.m.tensors_mut()) {
        take(&format!("adam.m.{n}"), slot)?;
    }
    for (n, slot) in names.iter().zip(adam.v.tensors_mut()) {
        take(&format!("adam.v.{n}"), slot)?;
    }
    let step_t = entries
        .remove(STEP_ENTRY)
        .ok_or_else(|| Error::IncompatibleCheckpoint("missing entry `step`".into()))?;
    if let Some(unknown) = entries.keys().min() {
        return Err(Error::IncompatibleCheckpoint(format!("unknown tensor `{unknown}`")));
    }
    let step = step_from_tensor(&step_t)?;
    adam.step = step;
    Ok((params, adam, step))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ApmParams,
    adam: &AdamState,
    step: u64,
) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_to_bytes(params, adam, step)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<(ApmParams, AdamState, u64)> {
    checkpoint_from_bytes(&read_file(path.as_ref())?, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    fn state(seed: u64) -> (ApmParams, AdamState) {
        let spec = ModelSpec::desk();
        let mut p = init_params(&spec, seed);
        p.round_to_f32();
        let mut adam = AdamState::new(&p);
        adam.m = init_params(&spec, seed + 1);
        adam.v = init_params(&spec, seed + 2);
        adam.v.for_each_mut(|t| t.data_mut().iter_mut().for_each(|v| *v = v.abs()));
        adam.round_to_f32();
        adam.step = 77;
        (p, adam)
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let (p, adam) = state(5);
        let step = 0x0123_4567_89ab_cdef;
        let bytes = checkpoint_to_bytes(&p, &adam, step).unwrap();
        let (p2, adam2, s2) = checkpoint_from_bytes(&bytes, &ModelSpec::desk()).unwrap();
        assert_eq!(p2, p);
        assert_eq!(adam2.m, adam.m);
        assert_eq!(adam2.v, adam.v);
        assert_eq!(s2, step);
        assert_eq!(adam2.step, step);
    }

    #[test]
    fn entry_count_is_three_per_param_plus_step() {
        let (p, adam) = state(1);
        let n = p.num_tensors();
        let entries = checkpoint_entries(&checkpoint_to_bytes(&p, &adam, 3).unwrap()).unwrap();
        assert_eq!(entries.len(), 3 * n + 1);
        // desk: conv kernel, 5 decoder layers and the head
        assert_eq!(entries.len(), 3 * (1 + 2 * 5 + 2) + 1);
        let names: Vec<String> = entries.into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, checkpoint_names(&p));
    }

    #[test]
    fn truncation_and_magic() {
        let (p, adam) = state(1);
        let bytes = checkpoint_to_bytes(&p, &adam, 3).unwrap();
        let spec = ModelSpec::desk();
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() / 2], &spec),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad, &spec), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn unknown_name_and_wrong_arch() {
        let (p, adam) = state(1);
        let mut bytes = checkpoint_to_bytes(&p, &adam, 3).unwrap();
        // rename the first entry `conv.kernel` -> `conv.kernex`
        let at = 4 + 4 + 2 + "conv.kerne".len();
        bytes[at] = b'x';
        let err = checkpoint_from_bytes(&bytes, &ModelSpec::desk()).unwrap_err();
        assert!(matches!(err, Error::IncompatibleCheckpoint(_)), "{err}");

        let good = checkpoint_to_bytes(&p, &adam, 3).unwrap();
        assert!(matches!(
            checkpoint_from_bytes(&good, &ModelSpec::desk_rgb()),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn step_limbs() {
        for s in [0u64, 1, 65535, 65536, u64::MAX] {
            assert_eq!(step_from_tensor(&step_tensor(s)).unwrap(), s);
        }
        assert!(step_from_tensor(&Tensor::vector(vec![0.5, 0.0, 0.0, 0.0])).is_err());
    }
}

//! Weight-space arithmetic over named tensor maps.
//!
//! Everything here is a pure function: deltas between checkpoints,
//! motion-degree extrapolation, DARE-style random pruning with rescale,
//! Task-Arithmetic combination, and the isolation step that splits a
//! fine-tuned model into adaptation, degradation, and consistency
//! parameter sets. Elementwise math runs in f64 and rounds to f32 once
//! per output entry; identical inputs give bitwise-identical outputs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::MaskStream;
use crate::tensor_store::{ParamPartition, Tensor, TensorMap};

/// What a [`DeltaMap`] represents in the isolation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Plain checkpoint difference, not yet pruned.
    Raw,
    /// Adaptation set: pruned fine-tune delta plus verbatim adapter tensors.
    Adt,
    /// Degradation set: pruned extrapolation delta.
    Deg,
    /// Full consistency weight map (not a difference; arithmetic must refuse it).
    ConFull,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Raw => "raw",
            Role::Adt => "adt",
            Role::Deg => "deg",
            Role::ConFull => "con_full",
        }
    }

    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "raw" => Ok(Role::Raw),
            "adt" => Ok(Role::Adt),
            "deg" => Ok(Role::Deg),
            "con_full" => Ok(Role::ConFull),
            other => Err(Error::Invalid(format!("unknown delta role {other:?}"))),
        }
    }
}

/// Named difference (or, for [`Role::ConFull`], a full weight map)
/// relative to the checkpoint identified by `base_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMap {
    pub entries: BTreeMap<String, Tensor>,
    pub base_id: String,
    pub role: Role,
    pub mask_seed: Option<u64>,
    pub prune_rate: Option<f64>,
}

impl DeltaMap {
    /// Pack into the checkpoint container (stage `isolated_delta`).
    pub fn to_tensor_map(&self) -> Result<TensorMap> {
        let mut m = TensorMap::new("isolated_delta")?;
        for (name, t) in &self.entries {
            m.insert(name, t.clone())?;
        }
        m.set_meta("role", self.role.as_str())?;
        m.set_meta("base_id", &self.base_id)?;
        if let Some(seed) = self.mask_seed {
            m.set_meta("mask_seed", &seed.to_string())?;
        }
        if let Some(p) = self.prune_rate {
            m.set_meta("prune_rate", &format!("{p}"))?;
        }
        Ok(m)
    }

    pub fn from_tensor_map(m: &TensorMap) -> Result<DeltaMap> {
        if m.stage() != "isolated_delta" {
            return Err(Error::Invalid(format!(
                "expected stage isolated_delta, found {:?}",
                m.stage()
            )));
        }
        let role = Role::parse(
            m.meta("role")
                .ok_or_else(|| Error::Format("delta container lacks role meta".into()))?,
        )?;
        let mask_seed = m
            .meta("mask_seed")
            .map(|s| {
                s.parse::<u64>()
                    .map_err(|_| Error::Format(format!("bad mask_seed {s:?}")))
            })
            .transpose()?;
        let prune_rate = m
            .meta("prune_rate")
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|p| (0.0..1.0).contains(p))
                    .ok_or_else(|| Error::Format(format!("bad prune_rate {s:?}")))
            })
            .transpose()?;
        Ok(DeltaMap {
            entries: m.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            base_id: m.meta("base_id").unwrap_or("").to_string(),
            role,
            mask_seed,
            prune_rate,
        })
    }
}

/// Binary keep/drop decisions for every entry of a delta. `true` marks
/// a kept entry. Regenerating with the same seed and rate reproduces
/// the identical mask, independent of sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub entries: BTreeMap<String, Vec<bool>>,
    pub seed: u64,
    pub drop_rate: f64,
}

impl MaskMap {
    pub fn sample(delta: &DeltaMap, drop_rate: f64, seed: u64) -> Result<MaskMap> {
        check_rate(drop_rate)?;
        let entries = delta
            .entries
            .iter()
            .map(|(name, t)| {
                let stream = MaskStream::new(seed, name);
                let keeps = (0..t.numel() as u64).map(|i| stream.keep(i, drop_rate)).collect();
                (name.clone(), keeps)
            })
            .collect();
        Ok(MaskMap {
            entries,
            seed,
            drop_rate,
        })
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !p.is_finite() || !(0.0..1.0).contains(&p) {
        return Err(Error::Invalid(format!("drop rate {p} must lie in [0, 1)")));
    }
    Ok(())
}

fn shared_pair<'a>(
    a: &'a TensorMap,
    b: &'a TensorMap,
    name: &str,
) -> Result<(&'a Tensor, &'a Tensor)> {
    let ta = a
        .get(name)
        .ok_or_else(|| Error::Incompatible(format!("shared tensor {name} missing")))?;
    let tb = b
        .get(name)
        .ok_or_else(|| Error::Incompatible(format!("shared tensor {name} missing")))?;
    if ta.shape() != tb.shape() {
        return Err(Error::Incompatible(format!(
            "tensor {name} has shape {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    Ok((ta, tb))
}

/// Elementwise difference `a − b` over the partition's shared names.
pub fn delta(a: &TensorMap, b: &TensorMap, partition: &ParamPartition) -> Result<DeltaMap> {
    let mut entries = BTreeMap::new();
    for name in &partition.shared_names {
        let (ta, tb) = shared_pair(a, b, name)?;
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x as f64 - y as f64)
            .collect();
        entries.insert(name.clone(), Tensor::from_f64(ta.shape().to_vec(), &data)?);
    }
    Ok(DeltaMap {
        entries,
        base_id: b.meta("id").unwrap_or("").to_string(),
        role: Role::Raw,
        mask_seed: None,
        prune_rate: None,
    })
}

/// Combine a base checkpoint with weighted deltas:
/// `out[n] = base[n] + Σᵢ wᵢ·deltaᵢ[n]` on names present in the base.
///
/// Adapter-only names carried by an [`Role::Adt`] delta are attached to
/// the output verbatim; they are new modules, not sums. Tensors no
/// delta touches (and any delta weighted exactly 0) pass through
/// bitwise. Accumulation runs in f64 and rounds once at the end.
pub fn task_arithmetic(
    base: &TensorMap,
    deltas: &[&DeltaMap],
    weights: &[f64],
) -> Result<TensorMap> {
    if deltas.is_empty() || deltas.len() != weights.len() {
        return Err(Error::Invalid(format!(
            "{} deltas with {} weights; need equal non-zero counts",
            deltas.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::Invalid(format!("non-finite merge weight {w}")));
    }
    for d in deltas {
        if d.role == Role::ConFull {
            return Err(Error::Invalid(
                "role con_full is a full weight map, not a delta".into(),
            ));
        }
        for (name, t) in &d.entries {
            match base.get(name) {
                Some(bt) if bt.shape() == t.shape() => {}
                Some(bt) => {
                    return Err(Error::Incompatible(format!(
                        "tensor {name} has shape {:?} vs base {:?}",
                        t.shape(),
                        bt.shape()
                    )));
                }
                None if d.role == Role::Adt => {}
                None => {
                    return Err(Error::Incompatible(format!(
                        "delta tensor {name} is absent from the base checkpoint"
                    )));
                }
            }
        }
    }

    let mut out = TensorMap::new(base.stage())?;
    for (k, v) in base.meta_entries() {
        out.set_meta(k, v)?;
    }
    for (name, bt) in base.iter() {
        let mut acc: Vec<f64> = bt.data().iter().map(|&v| v as f64).collect();
        let mut touched = false;
        for (d, &w) in deltas.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            if let Some(t) = d.entries.get(name) {
                for (a, &x) in acc.iter_mut().zip(t.data()) {
                    *a += w * x as f64;
                }
                touched = true;
            }
        }
        let tensor = if touched {
            Tensor::from_f64(bt.shape().to_vec(), &acc)?
        } else {
            bt.clone()
        };
        out.insert(name, tensor)?;
    }
    for d in deltas {
        if d.role != Role::Adt {
            continue;
        }
        for (name, t) in &d.entries {
            if base.get(name).is_none() {
                out.insert(name, t.clone())?;
            }
        }
    }
    Ok(out)
}

/// Push the pretrained weights away from the fine-tune direction:
/// `out[n] = pre[n] + alpha·(pre[n] − sft[n])` on shared names.
///
/// Adapter tensors never appear in the output; the result is a
/// base-architecture checkpoint at stage `dyn`.
pub fn extrapolate(
    theta_pre: &TensorMap,
    theta_sft: &TensorMap,
    alpha: f64,
    partition: &ParamPartition,
) -> Result<TensorMap> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Invalid(format!(
            "extrapolation strength {alpha} must be finite and non-negative"
        )));
    }
    let d = delta(theta_pre, theta_sft, partition)?;
    let mut out = task_arithmetic(theta_pre, &[&d], &[alpha])?;
    out.set_stage("dyn")?;
    out.set_meta("alpha", &format!("{alpha}"))?;
    Ok(out)
}

/// Randomly zero a fraction `p` of every tensor's entries and rescale
/// survivors by `1/(1−p)`, preserving the delta in expectation. The
/// mask is a pure function of `(seed, tensor name, entry index)`.
pub fn dare_prune(d: &DeltaMap, p: f64, seed: u64) -> Result<DeltaMap> {
    check_rate(p)?;
    match d.role {
        Role::Raw => {}
        Role::ConFull => {
            return Err(Error::Invalid(
                "cannot prune a con_full map: it is a full weight map, not a delta".into(),
            ));
        }
        other => {
            return Err(Error::Invalid(format!(
                "delta with role {} already carries a mask",
                other.as_str()
            )));
        }
    }
    let mask = MaskMap::sample(d, p, seed)?;
    let scale = 1.0 / (1.0 - p);
    let mut entries = BTreeMap::new();
    for (name, t) in &d.entries {
        let keeps = &mask.entries[name];
        let data: Vec<f32> = t
            .data()
            .iter()
            .zip(keeps)
            .map(|(&v, &keep)| if keep { (v as f64 * scale) as f32 } else { 0.0 })
            .collect();
        entries.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(DeltaMap {
        entries,
        base_id: d.base_id.clone(),
        role: Role::Raw,
        mask_seed: Some(seed),
        prune_rate: Some(p),
    })
}

/// The three parameter sets the sampler switches between.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolatedSets {
    pub theta_adt: DeltaMap,
    pub theta_deg: DeltaMap,
    pub theta_con: DeltaMap,
}

/// Split the fine-tuned and extrapolated checkpoints into disjointly
/// masked parameter sets:
///
/// * `theta_adt`: adapter tensors verbatim from `theta_sft`, plus the
///   pruned shared delta `DARE(θ_sft − θ_pre)` under `seed2`.
/// * `theta_deg`: the pruned extrapolation delta `DARE(θ_dyn − θ_pre)`
///   under `seed1`.
/// * `theta_con`: the full weight map `θ_sft − (shared part of
///   θ_adt)`; adapter tensors have no pretrained counterpart and are
///   not subtracted.
pub fn isolate_parameter_sets(
    theta_pre: &TensorMap,
    theta_sft: &TensorMap,
    theta_dyn: &TensorMap,
    partition: &ParamPartition,
    p: f64,
    seed1: u64,
    seed2: u64,
) -> Result<IsolatedSets> {
    check_rate(p)?;
    if theta_dyn.stage() != "dyn" {
        return Err(Error::Invalid(format!(
            "expected an extrapolated checkpoint (stage dyn), found stage {:?}",
            theta_dyn.stage()
        )));
    }
    if let Some(name) = partition
        .adapter_names
        .iter()
        .find(|n| theta_dyn.get(n).is_some())
    {
        return Err(Error::Incompatible(format!(
            "extrapolated checkpoint carries adapter tensor {name}"
        )));
    }

    let d_sft = delta(theta_sft, theta_pre, partition)?;
    let mut theta_adt = dare_prune(&d_sft, p, seed2)?;
    theta_adt.role = Role::Adt;
    for name in &partition.adapter_names {
        let t = theta_sft.get(name).ok_or_else(|| {
            Error::Incompatible(format!("adapter tensor {name} missing from fine-tuned map"))
        })?;
        theta_adt.entries.insert(name.clone(), t.clone());
    }

    let d_dyn = delta(theta_dyn, theta_pre, partition)?;
    let mut theta_deg = dare_prune(&d_dyn, p, seed1)?;
    theta_deg.role = Role::Deg;

    let mut con_entries = BTreeMap::new();
    if p == 0.0 {
        // With nothing pruned the shared part of theta_adt is the whole
        // fine-tune delta, so the consistency map is the pretrained
        // weights; copying them realizes that value without rounding.
        for name in &partition.shared_names {
            let (t, _) = shared_pair(theta_pre, theta_sft, name)?;
            con_entries.insert(name.clone(), t.clone());
        }
    } else {
        for name in &partition.shared_names {
            let sft_t = theta_sft.get(name).unwrap();
            let adt_t = &theta_adt.entries[name];
            let data: Vec<f64> = sft_t
                .data()
                .iter()
                .zip(adt_t.data())
                .map(|(&s, &a)| s as f64 - a as f64)
                .collect();
            con_entries.insert(name.clone(), Tensor::from_f64(sft_t.shape().to_vec(), &data)?);
        }
    }
    let base_id = theta_pre.meta("id").unwrap_or("").to_string();
    let theta_con = DeltaMap {
        entries: con_entries,
        base_id,
        role: Role::ConFull,
        mask_seed: Some(seed2),
        prune_rate: Some(p),
    };

    Ok(IsolatedSets {
        theta_adt,
        theta_deg,
        theta_con,
    })
}

/// Assemble the two samplable models from the isolated sets:
/// the motion model `θ_pre + w_deg·θ_deg + w_adt·θ_adt` (stage
/// `dyn_star`) and the consistency model `θ_con + w_adt·θ_adt` (stage
/// `con_star`). Both carry the adapter tensors and share one name set,
/// so a sampler can swap them mid-trajectory.
pub fn build_enhanced_models(
    theta_pre: &TensorMap,
    sets: &IsolatedSets,
    w_deg: f64,
    w_adt: f64,
) -> Result<(TensorMap, TensorMap)> {
    if sets.theta_con.role != Role::ConFull {
        return Err(Error::Invalid(
            "theta_con must carry role con_full".into(),
        ));
    }
    if !sets
        .theta_adt
        .entries
        .keys()
        .any(|n| theta_pre.get(n).is_none())
    {
        return Err(Error::Invalid(
            "theta_adt carries no adapter tensors".into(),
        ));
    }

    let mut dyn_star = task_arithmetic(
        theta_pre,
        &[&sets.theta_deg, &sets.theta_adt],
        &[w_deg, w_adt],
    )?;
    dyn_star.set_stage("dyn_star")?;
    dyn_star.set_meta("w_deg", &format!("{w_deg}"))?;
    dyn_star.set_meta("w_adt", &format!("{w_adt}"))?;

    let mut con_base = TensorMap::new("con_star")?;
    for (name, t) in &sets.theta_con.entries {
        con_base.insert(name, t.clone())?;
    }
    let mut con_star = task_arithmetic(&con_base, &[&sets.theta_adt], &[w_adt])?;
    con_star.set_stage("con_star")?;
    con_star.set_meta("w_adt", &format!("{w_adt}"))?;

    let names_match = dyn_star.len() == con_star.len()
        && dyn_star.names().zip(con_star.names()).all(|(a, b)| a == b);
    if !names_match {
        return Err(Error::Incompatible(
            "enhanced models ended up with different tensor sets".into(),
        ));
    }
    Ok((dyn_star, con_star))
}

//! Dual-metric learning head.
//!
//! Class prototypes are masked feature means of the support. Query features
//! are compared with each prototype by cosine similarity, giving one distance
//! map per foreground class. Two heads turn the maps into probabilities:
//!
//! * the attention guidance module (AGM) amplifies query features by each map,
//!   `r_c = m_c ⊙ h + h`, scores every branch with a shared 1×1 conv `φ`, and
//!   derives a background logit as the mean of a second conv `ω` over branches;
//! * the nearest centroid module (NCM) is parameter free: the maps are the
//!   logits and the background logit is the mean of `1 - m_c`.
//!
//! Both heads apply one softmax over the k foreground logits plus the
//! background logit, which is stored in the last channel. Background never has
//! a prototype.
//!
//! Training mixes the two cross-entropies with a weight `β` that shifts from
//! the AGM to the NCM as epochs advance. Base-class prototypes can be smoothed
//! across episodes with an exponential moving average ([`PrototypeBank`]).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, COSINE_EPS};
use crate::error::{contract_err, Error, Result};
use crate::taxonomy::{ClassId, LabelMask, BACKGROUND};
use crate::tensor::Tensor;

/// Probability floor used before taking logs in the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtoMode {
    Static,
    Dynamic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub vector: Vec<f64>,
    pub mode: ProtoMode,
    pub initialized: bool,
}

/// Per-class exponential moving averages of base-class prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    alpha: f64,
    entries: BTreeMap<ClassId, BankEntry>,
}

impl PrototypeBank {
    pub fn new(alpha: f64) -> Self {
        PrototypeBank { alpha, entries: BTreeMap::new() }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialized(&self, class: ClassId) -> bool {
        self.entries.get(&class).is_some_and(|e| e.initialized)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ClassId, &BankEntry)> {
        self.entries.iter().map(|(c, e)| (*c, e))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: ClassId) -> Result<&[f64]> {
        match self.entries.get(&class) {
            Some(e) if e.initialized => Ok(&e.vector),
            _ => Err(Error::State(format!("no dynamic prototype for class {class}"))),
        }
    }

    /// Restore an entry verbatim (checkpoint loading).
    pub fn insert(&mut self, class: ClassId, entry: BankEntry) -> Result<()> {
        if class == BACKGROUND {
            return Err(contract_err!("background has no prototype"));
        }
        self.entries.insert(class, entry);
        Ok(())
    }

    /// `p_d = α·p_d + (1 − α)·p_now`; the first update initialises `p_d := p_now`.
    pub fn update(&mut self, class: ClassId, p_now: &[f64], base: &BTreeSet<ClassId>) -> Result<&[f64]> {
        if class == BACKGROUND {
            return Err(contract_err!("background has no prototype"));
        }
        if !base.contains(&class) {
            return Err(contract_err!("class {class} is not a base class"));
        }
        if p_now.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("prototype for class {class} is not finite")));
        }
        let alpha = self.alpha;
        let entry = self.entries.entry(class).or_insert_with(|| BankEntry {
            vector: Vec::new(),
            mode: ProtoMode::Dynamic,
            initialized: false,
        });
        if entry.initialized {
            if entry.vector.len() != p_now.len() {
                return Err(contract_err!("prototype length changed for class {class}"));
            }
            for (d, &p) in entry.vector.iter_mut().zip(p_now) {
                *d = alpha * *d + (1.0 - alpha) * p;
            }
        } else {
            entry.vector = p_now.to_vec();
            entry.initialized = true;
        }
        Ok(&entry.vector)
    }
}

/// Masked mean of support features over the pixels of one class.
pub fn compute_prototype(g: &mut Graph, support_features: Var, class_mask: &[bool], class: ClassId) -> Result<Var> {
    if !class_mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask(class));
    }
    g.masked_mean(support_features, class_mask)
}

/// Where prototypes come from for one forward pass.
pub enum PrototypeSource<'a> {
    /// Masked means of the current support for every class.
    Static,
    /// Late training: base classes go through the EMA bank, which is updated.
    Dynamic(&'a mut PrototypeBank),
    /// Testing: base classes read the frozen bank, novel classes are static.
    Frozen(&'a PrototypeBank),
}

/// One foreground class and its prototype node.
#[derive(Clone, Copy, Debug)]
pub struct ClassPrototype {
    pub class: ClassId,
    pub proto: Var,
}

/// Prototypes for every foreground class of a support mask already at feature
/// resolution. Classes with no pixels there are dropped with a warning.
pub fn effective_prototypes(
    g: &mut Graph,
    support_features: Var,
    support_mask: &LabelMask,
    source: PrototypeSource<'_>,
    base: &BTreeSet<ClassId>,
) -> Result<Vec<ClassPrototype>> {
    let mut source = source;
    let mut out = Vec::new();
    for class in support_mask.foreground_classes() {
        let mask = support_mask.binary(class);
        let p_static = match compute_prototype(g, support_features, &mask, class) {
            Ok(p) => p,
            Err(Error::EmptyMask(_)) => {
                log::warn!("class {class} vanished from the support at feature resolution; dropped");
                continue;
            }
            Err(e) => return Err(e),
        };
        if !(g.value(p_static).norm() > COSINE_EPS) {
            log::warn!("class {class} has an all-zero support prototype; dropped");
            continue;
        }
        let proto = match &mut source {
            PrototypeSource::Static => p_static,
            PrototypeSource::Dynamic(bank) => {
                let prev = bank.is_initialized(class).then(|| bank.get(class).map(<[f64]>::to_vec)).transpose()?;
                let now = g.value(p_static).data().to_vec();
                bank.update(class, &now, base)?;
                match prev {
                    None => p_static,
                    Some(prev) => {
                        let alpha = bank.alpha();
                        let carried = g.constant(Tensor::from_vec(prev.iter().map(|v| alpha * v).collect()));
                        let fresh = g.affine(p_static, 1.0 - alpha, 0.0);
                        g.add(carried, fresh)?
                    }
                }
            }
            PrototypeSource::Frozen(bank) => {
                if base.contains(&class) {
                    g.constant(Tensor::from_vec(bank.get(class)?.to_vec()))
                } else {
                    p_static
                }
            }
        };
        out.push(ClassPrototype { class, proto });
    }
    Ok(out)
}

/// One cosine distance map per prototype.
pub fn distance_maps(g: &mut Graph, query_features: Var, protos: &[ClassPrototype]) -> Result<Vec<Var>> {
    protos.iter().map(|p| g.cosine_map(query_features, p.proto)).collect()
}

/// Graph handles for the two 1×1 head convolutions.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub phi_kernel: Var,
    pub phi_bias: Var,
    pub omega_kernel: Var,
    pub omega_bias: Var,
}

/// Attention guidance head. Returns (H, W, k+1) probabilities, background last.
pub fn agm_forward(g: &mut Graph, query_features: Var, maps: &[Var], head: &HeadVars) -> Result<Var> {
    if maps.is_empty() {
        return Err(contract_err!("AGM needs at least one foreground class"));
    }
    let mut logits = Vec::with_capacity(maps.len() + 1);
    let mut bg_terms = Vec::with_capacity(maps.len());
    for &m in maps {
        let r = g.attend(query_features, m)?;
        logits.push(g.conv2d(r, head.phi_kernel, head.phi_bias, 1, 0)?);
        bg_terms.push(g.conv2d(r, head.omega_kernel, head.omega_bias, 1, 0)?);
    }
    let bg = g.mean_of(&bg_terms)?;
    logits.push(bg);
    let stacked = g.stack_maps(&logits)?;
    g.softmax_channels(stacked)
}

/// Nearest centroid head. Returns (H, W, k+1) probabilities, background last.
pub fn ncm_forward(g: &mut Graph, maps: &[Var]) -> Result<Var> {
    ncm_forward_scaled(g, maps, 1.0)
}

/// [`ncm_forward`] with every logit multiplied by `scale` before the softmax.
/// The arg-max is the same for any positive scale; only confidence changes.
pub fn ncm_forward_scaled(g: &mut Graph, maps: &[Var], scale: f64) -> Result<Var> {
    if maps.is_empty() {
        return Err(contract_err!("NCM needs at least one foreground class"));
    }
    let inverted: Vec<Var> = maps.iter().map(|&m| g.affine(m, -1.0, 1.0)).collect();
    let bg = g.mean_of(&inverted)?;
    let mut logits = maps.to_vec();
    logits.push(bg);
    let mut stacked = g.stack_maps(&logits)?;
    if scale != 1.0 {
        stacked = g.affine(stacked, scale, 0.0);
    }
    g.softmax_channels(stacked)
}

/// Linear weight-shifting schedule `1 - epoch / max_epoch`.
pub fn beta(epoch: usize, max_epoch: usize) -> Result<f64> {
    if max_epoch == 0 || epoch > max_epoch {
        return Err(contract_err!("beta needs 0 <= epoch <= max_epoch and max_epoch > 0, got {epoch}/{max_epoch}"));
    }
    Ok(1.0 - epoch as f64 / max_epoch as f64)
}

/// Mapping between prediction channels and class ids: foreground classes in
/// order, background last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMap {
    classes: Vec<ClassId>,
}

impl ChannelMap {
    pub fn new(foreground: &[ClassId]) -> Self {
        ChannelMap { classes: foreground.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn foreground(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn class_of(&self, channel: usize) -> ClassId {
        self.classes.get(channel).copied().unwrap_or(BACKGROUND)
    }

    pub fn channel_of(&self, class: ClassId) -> Option<usize> {
        if class == BACKGROUND {
            Some(self.classes.len())
        } else {
            self.classes.iter().position(|&c| c == class)
        }
    }

    /// Channel index per pixel of a ground-truth mask.
    pub fn targets(&self, gt: &LabelMask) -> Result<Vec<usize>> {
        gt.labels()
            .iter()
            .map(|&l| self.channel_of(l).ok_or_else(|| contract_err!("ground-truth class {l} has no prediction channel")))
            .collect()
    }
}

/// Cross-entropy terms of one step. Either head can be skipped when its weight is zero.
#[derive(Clone, Copy, Debug)]
pub struct DmlLoss {
    pub total: Var,
    pub agm_ce: Option<f64>,
    pub ncm_ce: Option<f64>,
}

/// `β·CE(agm) + (1 − β)·CE(ncm)`, each CE a pixel mean of `-ln p_target`.
pub fn dml_loss(g: &mut Graph, agm: Option<Var>, ncm: Option<Var>, targets: &[usize], beta: f64) -> Result<DmlLoss> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(contract_err!("beta must lie in [0, 1], got {beta}"));
    }
    let mut terms = Vec::new();
    let mut agm_ce = None;
    let mut ncm_ce = None;
    if beta > 0.0 {
        let p = agm.ok_or_else(|| contract_err!("beta > 0 needs AGM probabilities"))?;
        let ce = g.nll(p, targets, PROB_CLAMP)?;
        agm_ce = Some(g.value(ce).item());
        terms.push(g.affine(ce, beta, 0.0));
    }
    if beta < 1.0 {
        let p = ncm.ok_or_else(|| contract_err!("beta < 1 needs NCM probabilities"))?;
        let ce = g.nll(p, targets, PROB_CLAMP)?;
        ncm_ce = Some(g.value(ce).item());
        terms.push(g.affine(ce, 1.0 - beta, 0.0));
    }
    let total = match terms[..] {
        [one] => one,
        [a, b] => g.add(a, b)?,
        _ => unreachable!("beta in [0, 1] selects at least one head"),
    };
    Ok(DmlLoss { total, agm_ce, ncm_ce })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::taxonomy::Granularity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base() -> BTreeSet<ClassId> {
        [1, 2, 3].into_iter().collect()
    }

    #[test]
    fn prototype_examples() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, 9.0, 9.0]).unwrap());
        let p = compute_prototype(&mut g, f, &[true, true, false], 1).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
        assert!(matches!(compute_prototype(&mut g, f, &[false; 3], 4), Err(Error::EmptyMask(4))));
        let c = g.constant(Tensor::new(&[2, 2, 3], [0.3, -1.0, 2.0].repeat(4)).unwrap());
        let p = compute_prototype(&mut g, c, &[true, false, true, true], 1).unwrap();
        assert!(g.value(p).data().iter().zip([0.3, -1.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn ema_examples() {
        let b = base();
        let mut bank = PrototypeBank::new(0.001);
        assert!(bank.get(1).is_err());
        bank.update(1, &[1.0, 0.0], &b).unwrap();
        let v = bank.update(1, &[0.0, 1.0], &b).unwrap().to_vec();
        assert!((v[0] - 0.001).abs() < 1e-15 && (v[1] - 0.999).abs() < 1e-15);

        let mut keep = PrototypeBank::new(1.0);
        keep.update(2, &[3.0], &b).unwrap();
        assert_eq!(keep.update(2, &[7.0], &b).unwrap(), &[3.0]);
        let mut replace = PrototypeBank::new(0.0);
        replace.update(2, &[3.0], &b).unwrap();
        assert_eq!(replace.update(2, &[7.0], &b).unwrap(), &[7.0]);

        assert!(matches!(bank.update(9, &[0.0, 0.0], &b), Err(Error::Contract(_))));
        assert!(matches!(bank.update(BACKGROUND, &[0.0, 0.0], &b), Err(Error::Contract(_))));
    }

    #[test]
    fn ema_converges_geometrically() {
        let b = base();
        let alpha = 0.3;
        let mut bank = PrototypeBank::new(alpha);
        bank.update(1, &[5.0, -2.0], &b).unwrap();
        let target = [1.0, 1.0];
        let dist = |v: &[f64]| ((v[0] - 1.0).powi(2) + (v[1] - 1.0).powi(2)).sqrt();
        let mut d = dist(bank.get(1).unwrap());
        for _ in 0..20 {
            let nd = dist(bank.update(1, &target, &b).unwrap());
            assert!((nd - alpha * d).abs() < 1e-12);
            d = nd;
        }
    }

    #[test]
    fn beta_schedule() {
        assert_eq!(beta(0, 30).unwrap(), 1.0);
        assert_eq!(beta(30, 30).unwrap(), 0.0);
        assert_eq!(beta(15, 30).unwrap(), 0.5);
        assert!(beta(31, 30).is_err());
        assert!(beta(0, 0).is_err());
    }

    fn maps(g: &mut Graph, values: &[Vec<f64>], h: usize, w: usize) -> Vec<Var> {
        values.iter().map(|v| g.constant(Tensor::new(&[h, w], v.clone()).unwrap())).collect()
    }

    #[test]
    fn ncm_examples() {
        let mut g = Graph::new();
        let m = maps(&mut g, &[vec![1.0; 4]], 2, 2);
        let p = ncm_forward(&mut g, &m).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(p).data()[0] - e / (e + 1.0)).abs() < 1e-12);

        let m = maps(&mut g, &[vec![0.5; 4], vec![0.5; 4]], 2, 2);
        let p = ncm_forward(&mut g, &m).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(ncm_forward(&mut g, &[]).is_err());
    }

    #[test]
    fn ncm_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.constant(Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng));
        let b = g.constant(Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng));
        let ab = ncm_forward(&mut g, &[a, b]).unwrap();
        let ba = ncm_forward(&mut g, &[b, a]).unwrap();
        let (x, y) = (g.value(ab).data(), g.value(ba).data());
        for px in 0..9 {
            assert!((x[px * 3] - y[px * 3 + 1]).abs() < 1e-15);
            assert!((x[px * 3 + 2] - y[px * 3 + 2]).abs() < 1e-15);
        }
    }

    fn head(g: &mut Graph, k: usize, value: f64) -> HeadVars {
        HeadVars {
            phi_kernel: g.param(Tensor::full(&[1, 1, k, 1], value)),
            phi_bias: g.param(Tensor::zeros(&[1])),
            omega_kernel: g.param(Tensor::full(&[1, 1, k, 1], value)),
            omega_bias: g.param(Tensor::zeros(&[1])),
        }
    }

    #[test]
    fn agm_zero_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::new();
        let h = g.constant(Tensor::randn(&[4, 4, 3], 1.0, &mut rng));
        let m = g.constant(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
        let hv = head(&mut g, 3, 0.0);
        let p = agm_forward(&mut g, h, &[m], &hv).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn agm_zero_attention_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::new();
        let h = g.constant(Tensor::randn(&[3, 3, 2], 1.0, &mut rng));
        let m = g.constant(Tensor::zeros(&[3, 3]));
        let r = g.attend(h, m).unwrap();
        assert_eq!(g.value(r), g.value(h));
    }

    #[test]
    fn agm_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = Tensor::randn(&[3, 3, 3], 1.0, &mut rng);
        let p1 = Tensor::randn(&[3], 1.0, &mut rng);
        let p2 = Tensor::randn(&[3], 1.0, &mut rng);
        let phi = Tensor::randn(&[1, 1, 3, 1], 0.5, &mut rng);
        let omega = Tensor::randn(&[1, 1, 3, 1], 0.5, &mut rng);
        let targets: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let err = grad_check(&[h, p1, p2, phi, omega], 1e-5, |g, v| {
            let hv = HeadVars {
                phi_kernel: v[3],
                phi_bias: g.constant(Tensor::scalar(0.1)),
                omega_kernel: v[4],
                omega_bias: g.constant(Tensor::scalar(-0.2)),
            };
            let m1 = g.cosine_map(v[0], v[1])?;
            let m2 = g.cosine_map(v[0], v[2])?;
            let p = agm_forward(g, v[0], &[m1, m2], &hv)?;
            g.nll(p, &targets, PROB_CLAMP)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn loss_weighting() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap());
        let n = g.constant(Tensor::new(&[1, 2, 2], vec![0.6, 0.4, 0.5, 0.5]).unwrap());
        let t = [0, 1];
        let ce_a = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        let ce_n = -(0.6f64.ln() + 0.5f64.ln()) / 2.0;
        let only_a = dml_loss(&mut g, Some(a), None, &t, 1.0).unwrap();
        assert!((g.value(only_a.total).item() - ce_a).abs() < 1e-15);
        assert!(only_a.ncm_ce.is_none());
        let only_n = dml_loss(&mut g, None, Some(n), &t, 0.0).unwrap();
        assert!((g.value(only_n.total).item() - ce_n).abs() < 1e-15);
        let mix = dml_loss(&mut g, Some(a), Some(n), &t, 0.25).unwrap();
        assert!((g.value(mix.total).item() - (0.25 * ce_a + 0.75 * ce_n)).abs() < 1e-15);
        let perfect = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = dml_loss(&mut g, Some(perfect), None, &t, 1.0).unwrap();
        assert!(g.value(l.total).item() <= 1e-6);
        assert!(dml_loss(&mut g, Some(a), None, &[0, 2], 1.0).is_err());
    }

    #[test]
    fn channel_map_targets() {
        let cm = ChannelMap::new(&[2, 7]);
        let gt = LabelMask::new(1, 3, vec![7, 0, 2], Granularity::Fine).unwrap();
        assert_eq!(cm.targets(&gt).unwrap(), vec![1, 2, 0]);
        let bad = LabelMask::new(1, 1, vec![5], Granularity::Fine).unwrap();
        assert!(cm.targets(&bad).is_err());
        assert_eq!(cm.class_of(2), BACKGROUND);
    }

    #[test]
    fn phases_pick_the_right_prototypes() {
        let b = base();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let feats = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
        let mask = LabelMask::new(2, 2, vec![1, 1, 5, 0], Granularity::Fine).unwrap();

        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let stat = effective_prototypes(&mut g, f, &mask, PrototypeSource::Static, &b).unwrap();
        assert_eq!(stat.iter().map(|p| p.class).collect::<Vec<_>>(), vec![1, 5]);
        let p1 = g.value(stat[0].proto).clone();

        let mut bank = PrototypeBank::new(0.5);
        bank.update(1, &[1.0, 1.0, 1.0], &b).unwrap();
        let frozen = effective_prototypes(&mut g, f, &mask, PrototypeSource::Frozen(&bank), &b).unwrap();
        assert_eq!(g.value(frozen[0].proto).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.value(frozen[1].proto), g.value(stat[1].proto));

        let base_only = LabelMask::new(2, 2, vec![1, 1, 0, 0], Granularity::Fine).unwrap();
        let dynp = effective_prototypes(&mut g, f, &base_only, PrototypeSource::Dynamic(&mut bank), &b).unwrap();
        let expect: Vec<f64> = p1.data().iter().map(|v| 0.5 + 0.5 * v).collect();
        assert_eq!(bank.get(1).unwrap(), expect.as_slice());
        assert!(g.value(dynp[0].proto).data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-15));
        // novel classes must not reach the bank during training
        assert!(effective_prototypes(&mut g, f, &mask, PrototypeSource::Dynamic(&mut bank), &b).is_err());

        let empty = PrototypeBank::new(0.5);
        let err = effective_prototypes(&mut g, f, &LabelMask::new(2, 2, vec![2, 0, 0, 0], Granularity::Fine).unwrap(), PrototypeSource::Frozen(&empty), &b);
        assert!(matches!(err, Err(Error::State(_))));
    }
}

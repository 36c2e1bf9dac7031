//! Mixed-modal calibration sets and held-out evaluation splits.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{CalibHeader, Container, ContainerKind};
use crate::error::{LuqError, Result};
use crate::tensor::rng_for;

/// Target id for positions that are not scored (image context).
pub const NO_TARGET: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Multimodal,
}

/// Pre-embedded sequence. `targets[t]` is the token to predict at `t`, or
/// [`NO_TARGET`].
#[derive(Debug, Clone, PartialEq)]
pub struct MmSequence {
    pub embeds: Vec<f32>,
    pub targets: Vec<u32>,
}

impl MmSequence {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sequence {
    /// Token ids; position `t` predicts token `t + 1`.
    Text(Vec<u32>),
    Multimodal(MmSequence),
}

impl Sequence {
    pub fn modality(&self) -> Modality {
        match self {
            Sequence::Text(_) => Modality::Text,
            Sequence::Multimodal(_) => Modality::Multimodal,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sequence::Text(t) => t.len(),
            Sequence::Multimodal(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Next-token target of every position.
    pub fn targets(&self) -> Vec<u32> {
        match self {
            Sequence::Text(t) => {
                let mut out: Vec<u32> = t.iter().skip(1).copied().collect();
                if !t.is_empty() {
                    out.push(NO_TARGET);
                }
                out
            }
            Sequence::Multimodal(m) => m.targets.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub sequences: Vec<Sequence>,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn count(&self, m: Modality) -> usize {
        self.sequences.iter().filter(|s| s.modality() == m).count()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.len() != self.seq_len {
                return Err(LuqError::shape(format!("sequence {i} has length {} (seq_len {})", s.len(), self.seq_len)));
            }
            if let Sequence::Multimodal(m) = s {
                if m.embeds.len() != self.seq_len * self.hidden_dim {
                    return Err(LuqError::shape(format!(
                        "multimodal sequence {i}: embedding width differs from hidden_dim {}",
                        self.hidden_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn header(&self) -> CalibHeader {
        CalibHeader {
            seq_len: self.seq_len,
            hidden_dim: self.hidden_dim,
            alpha: self.alpha,
            seed: self.seed,
            modality: self.sequences.iter().map(Sequence::modality).collect(),
        }
    }

    /// `kind = "calib"` container with tensors `text` `[n_text, N]`,
    /// `mm.embeds` `[n_mm, N, d]` and `mm.targets` `[n_mm, N]`.
    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let mut c = Container::new(ContainerKind::Calib, serde_json::to_value(self.header())?);
        let (mut text, mut embeds, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for s in &self.sequences {
            match s {
                Sequence::Text(t) => text.extend_from_slice(t),
                Sequence::Multimodal(m) => {
                    embeds.extend_from_slice(&m.embeds);
                    targets.extend_from_slice(&m.targets);
                }
            }
        }
        let (nt, nm) = (self.count(Modality::Text), self.count(Modality::Multimodal));
        c.push_u32("text", &[nt, self.seq_len], &text)?;
        c.push_f32("mm.embeds", &[nm, self.seq_len, self.hidden_dim], &embeds)?;
        c.push_u32("mm.targets", &[nm, self.seq_len], &targets)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::Calib {
            return Err(LuqError::Manifest("expected a calib container".into()));
        }
        let h: CalibHeader = serde_json::from_value(c.config.clone())
            .map_err(|e| LuqError::Manifest(format!("calib header: {e}")))?;
        let (ts, text) = c.u32s("text")?;
        let (es, embeds) = c.f32s("mm.embeds")?;
        let (gs, targets) = c.u32s("mm.targets")?;
        let (n, d) = (h.seq_len, h.hidden_dim);
        let nt = h.modality.iter().filter(|m| **m == Modality::Text).count();
        let nm = h.modality.len() - nt;
        if ts != [nt, n] || es != [nm, n, d] || gs != [nm, n] {
            return Err(LuqError::Manifest("calib tensor shapes disagree with the header".into()));
        }
        let (mut it, mut im) = (0, 0);
        let sequences = h
            .modality
            .iter()
            .map(|m| match m {
                Modality::Text => {
                    it += 1;
                    Sequence::Text(text[(it - 1) * n..it * n].to_vec())
                }
                Modality::Multimodal => {
                    im += 1;
                    Sequence::Multimodal(MmSequence {
                        embeds: embeds[(im - 1) * n * d..im * n * d].to_vec(),
                        targets: targets[(im - 1) * n..im * n].to_vec(),
                    })
                }
            })
            .collect();
        let set = CalibrationSet { sequences, seq_len: n, hidden_dim: d, alpha: h.alpha, seed: h.seed };
        set.validate()?;
        Ok(set)
    }
}

/// Number of multimodal sequences for ratio `alpha` out of `n`.
pub fn multimodal_count(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64 + 1e-9).floor() as usize).min(n)
}

fn text_chunks(pool: &[Vec<u32>], seq_len: usize) -> Vec<Vec<u32>> {
    let stream: Vec<u32> = pool.iter().flatten().copied().collect();
    stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect()
}

fn mm_chunks(pool: &[MmSequence], seq_len: usize, dim: usize) -> Vec<MmSequence> {
    let embeds: Vec<f32> = pool.iter().flat_map(|m| m.embeds.iter().copied()).collect();
    let targets: Vec<u32> = pool.iter().flat_map(|m| m.targets.iter().copied()).collect();
    targets
        .chunks_exact(seq_len)
        .zip(embeds.chunks_exact(seq_len * dim))
        .map(|(t, e)| MmSequence { embeds: e.to_vec(), targets: t.to_vec() })
        .collect()
}

fn draw<T: Clone>(chunks: &[T], count: usize, rng: &mut impl Rng) -> Vec<T> {
    if count <= chunks.len() {
        index::sample(rng, chunks.len(), count).into_iter().map(|i| chunks[i].clone()).collect()
    } else {
        (0..count).map(|_| chunks[rng.random_range(0..chunks.len())].clone()).collect()
    }
}

/// Sample `floor(α·n)` multimodal and `n − floor(α·n)` text windows of
/// length `seq_len` and shuffle them. Pools are concatenated and cut into
/// non-overlapping windows; windows are drawn without replacement when
/// enough exist.
pub fn build_mixed_calibration(
    text_pool: &[Vec<u32>],
    mm_pool: &[MmSequence],
    hidden_dim: usize,
    n_seqs: usize,
    seq_len: usize,
    alpha: f64,
    seed: u64,
) -> Result<CalibrationSet> {
    if seq_len == 0 {
        return Err(LuqError::invalid("seq_len must be >= 1"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LuqError::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    for m in mm_pool {
        if m.embeds.len() != m.targets.len() * hidden_dim {
            return Err(LuqError::shape("multimodal pool entry width differs from hidden_dim"));
        }
    }
    let n_mm = multimodal_count(alpha, n_seqs);
    let n_text = n_seqs - n_mm;
    let mut sequences = Vec::with_capacity(n_seqs);
    if n_mm > 0 {
        let chunks = mm_chunks(mm_pool, seq_len, hidden_dim);
        if chunks.is_empty() {
            return Err(LuqError::Empty("multimodal pool"));
        }
        let mut rng = rng_for(seed, 0x6d6d);
        sequences.extend(draw(&chunks, n_mm, &mut rng).into_iter().map(Sequence::Multimodal));
    }
    if n_text > 0 {
        let chunks = text_chunks(text_pool, seq_len);
        if chunks.is_empty() {
            return Err(LuqError::Empty("text pool"));
        }
        let mut rng = rng_for(seed, 0x7478);
        sequences.extend(draw(&chunks, n_text, &mut rng).into_iter().map(Sequence::Text));
    }
    sequences.shuffle(&mut rng_for(seed, 0x7368));
    Ok(CalibrationSet { sequences, seq_len, hidden_dim, alpha, seed })
}

/// Stratified split into `(calib, eval)`. The eval size is `round(frac·n)`,
/// shared between modalities by largest remainder; relative order is kept.
pub fn split_holdout(set: &CalibrationSet, holdout_frac: f64, seed: u64) -> Result<(CalibrationSet, CalibrationSet)> {
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(LuqError::invalid(format!("holdout fraction {holdout_frac} outside (0, 1)")));
    }
    let n = set.len();
    let n_eval = (holdout_frac * n as f64).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(LuqError::invalid(format!("holdout {holdout_frac} of {n} sequences empties one side")));
    }
    let groups: [Vec<usize>; 2] = [Modality::Text, Modality::Multimodal].map(|m| {
        (0..n).filter(|&i| set.sequences[i].modality() == m).collect()
    });
    let exact: Vec<f64> = groups.iter().map(|g| holdout_frac * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut left = n_eval.saturating_sub(quota.iter().sum());
    let mut by_rem: Vec<usize> = vec![0, 1];
    by_rem.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    while left > 0 {
        let before = left;
        for &g in &by_rem {
            if left > 0 && quota[g] < groups[g].len() {
                quota[g] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }

    let mut in_eval = vec![false; n];
    for (g, idx) in groups.iter().enumerate() {
        let mut rng = rng_for(seed, 0x686f + g as u64);
        for j in index::sample(&mut rng, idx.len(), quota[g]) {
            in_eval[idx[j]] = true;
        }
    }
    let part = |want: bool| CalibrationSet {
        sequences: (0..n).filter(|&i| in_eval[i] == want).map(|i| set.sequences[i].clone()).collect(),
        ..set.clone_header()
    };
    Ok((part(false), part(true)))
}

impl CalibrationSet {
    fn clone_header(&self) -> CalibrationSet {
        CalibrationSet {
            sequences: Vec::new(),
            seq_len: self.seq_len,
            hidden_dim: self.hidden_dim,
            alpha: self.alpha,
            seed: self.seed,
        }
    }
}

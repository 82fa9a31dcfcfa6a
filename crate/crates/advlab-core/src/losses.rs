//! Training and attack objectives: bidirectional contrastive loss,
//! token-level cross entropy, difference-of-logits-ratio, and the
//! answer-position NLL for instruction tuning and captioning.

use crate::error::{Error, Result};
use crate::models::{CaptionForward, CaptionerParams, SampleTokens, VisionEncoder};
use crate::tensor::Tensor;

/// Per-row cross entropy of `logits` (N×K) against `targets`, computed as
/// logsumexp minus the target logit. The row max is subtracted as a
/// constant, so exp never overflows.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument(format!("cross entropy expects 2-D logits, got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    if targets.len() != n {
        return Err(Error::LengthMismatch { what: "cross entropy targets".into() });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!("target {t} out of range for {k} classes")));
    }
    let data = logits.data();
    let mut maxes = Vec::with_capacity(n);
    let mut onehot = vec![0.0; n * k];
    for r in 0..n {
        let row = &data[r * k..(r + 1) * k];
        maxes.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        onehot[r * k + targets[r]] = 1.0;
    }
    let m_col = Tensor::from_vec(maxes.clone(), &[n, 1])?;
    let m_flat = Tensor::from_vec(maxes, &[n])?;
    let lse = logits.sub(&m_col)?.exp()?.sum(Some(1))?.log()?.add(&m_flat)?;
    let zt = logits.mul(&Tensor::from_vec(onehot, &[n, k])?)?.sum(Some(1))?;
    lse.sub(&zt)
}

/// Mean cross entropy over rows.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    cross_entropy_rows(logits, targets)?.mean(None)
}

fn check_unit_rows(name: &str, e: &Tensor) -> Result<()> {
    let s = e.shape();
    let (n, d) = (s[0], s[1]);
    let data = e.data();
    for r in 0..n {
        let norm: f64 = data[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "{name} row {r} has norm {norm}, expected unit"
            )));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over matched (image, text) rows: cosine logits scaled
/// by 1/τ, cross entropy in both directions, averaged. Both inputs must be
/// row-wise unit norm.
pub fn contrastive_loss(img: &Tensor, txt: &Tensor, inv_tau: &Tensor) -> Result<Tensor> {
    let (si, st) = (img.shape(), txt.shape());
    if si.len() != 2 || st.len() != 2 || si != st {
        return Err(Error::ShapeMismatch { op: "contrastive", lhs: si, rhs: st });
    }
    check_unit_rows("image embeddings", img)?;
    check_unit_rows("text embeddings", txt)?;
    let b = si[0];
    let logits = img.matmul(&txt.transpose(0, 1)?)?.mul(inv_tau)?;
    let identity: Vec<usize> = (0..b).collect();
    let i2t = cross_entropy(&logits, &identity)?;
    let t2i = cross_entropy(&logits.transpose(0, 1)?, &identity)?;
    i2t.add(&t2i)?.scalar_mul(0.5)
}

fn sorted_desc(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx
}

fn gather_rows(logits: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let mut onehot = vec![0.0; n * k];
    for (r, &c) in cols.iter().enumerate() {
        onehot[r * k + c] = 1.0;
    }
    logits.mul(&Tensor::from_vec(onehot, &[n, k])?)?.sum(Some(1))
}

/// Untargeted difference-of-logits-ratio, one value per row:
/// -(z_y - max_{i != y} z_i) / (z_(1) - z_(3)), with z_(j) the j-th largest
/// logit. Sort indices come from detached values; gradients flow through
/// the gathered logits.
pub fn dlr_rows(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 3 {
        return Err(Error::InvalidArgument(format!(
            "untargeted DLR needs 2-D logits with at least 3 classes, got {s:?}"
        )));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::LengthMismatch { what: "DLR labels".into() });
    }
    let data = logits.data();
    let mut y_cols = Vec::with_capacity(n);
    let mut other_cols = Vec::with_capacity(n);
    let mut p1_cols = Vec::with_capacity(n);
    let mut p3_cols = Vec::with_capacity(n);
    for r in 0..n {
        let y = labels[r];
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
        }
        let row = &data[r * k..(r + 1) * k];
        let order = sorted_desc(row);
        if row[order[0]] - row[order[2]] == 0.0 {
            return Err(Error::DegenerateLogits);
        }
        let best_other = (0..k).filter(|&i| i != y).max_by(|&a, &b| {
            row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a))
        }).unwrap();
        y_cols.push(y);
        other_cols.push(best_other);
        p1_cols.push(order[0]);
        p3_cols.push(order[2]);
    }
    let zy = gather_rows(logits, &y_cols)?;
    let zo = gather_rows(logits, &other_cols)?;
    let zp1 = gather_rows(logits, &p1_cols)?;
    let zp3 = gather_rows(logits, &p3_cols)?;
    zo.sub(&zy)?.div(&zp1.sub(&zp3)?)
}

/// Targeted difference-of-logits-ratio, one value per row:
/// -(z_y - z_t) / (z_(1) - (z_(3) + z_(4)) / 2).
pub fn dlr_targeted_rows(logits: &Tensor, labels: &[usize], targets: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 4 {
        return Err(Error::InvalidArgument(format!(
            "targeted DLR needs 2-D logits with at least 4 classes, got {s:?}"
        )));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n || targets.len() != n {
        return Err(Error::LengthMismatch { what: "targeted DLR labels".into() });
    }
    let data = logits.data();
    let mut p1_cols = Vec::with_capacity(n);
    let mut halves = vec![0.0; n * k];
    for r in 0..n {
        if labels[r] >= k || targets[r] >= k {
            return Err(Error::InvalidArgument(format!(
                "label {} or target {} out of range for {k} classes",
                labels[r], targets[r]
            )));
        }
        let row = &data[r * k..(r + 1) * k];
        let order = sorted_desc(row);
        let den = row[order[0]] - 0.5 * (row[order[2]] + row[order[3]]);
        if den == 0.0 {
            return Err(Error::DegenerateLogits);
        }
        p1_cols.push(order[0]);
        halves[r * k + order[2]] += 0.5;
        halves[r * k + order[3]] += 0.5;
    }
    let zy = gather_rows(logits, labels)?;
    let zt = gather_rows(logits, targets)?;
    let zp1 = gather_rows(logits, &p1_cols)?;
    let zmid = logits.mul(&Tensor::from_vec(halves, &[n, k])?)?.sum(Some(1))?;
    zt.sub(&zy)?.div(&zp1.sub(&zmid)?)
}

/// Mean untargeted DLR over the batch.
pub fn dlr_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    dlr_rows(logits, labels)?.mean(None)
}

/// Mean targeted DLR over the batch.
pub fn dlr_targeted_loss(logits: &Tensor, labels: &[usize], targets: &[usize]) -> Result<Tensor> {
    dlr_targeted_rows(logits, labels, targets)?.mean(None)
}

/// NLL over exactly the answer positions (answer words plus EOS) of a
/// captioner forward: per-sample mean over answer tokens, then batch mean.
pub fn answer_nll(fw: &CaptionForward) -> Result<Tensor> {
    let s = fw.logits.shape();
    let (b, t, v) = (s[0], s[1], s[2]);
    let flat = fw.logits.reshape(&[b * t, v])?;
    let mut targets = Vec::with_capacity(b * t);
    for row in &fw.targets {
        targets.extend(row.iter().map(|&id| id as usize));
    }
    let ce = cross_entropy_rows(&flat, &targets)?;
    let mask = Tensor::from_vec(fw.answer_mask.clone(), &[b * t])?;
    let counts = Tensor::from_vec(fw.answer_counts.clone(), &[b])?;
    ce.mul(&mask)?.reshape(&[b, t])?.sum(Some(1))?.div(&counts)?.mean(None)
}

/// Instruction loss: forward the captioner on (image, instruction, answer)
/// batches and score the answer positions.
pub fn instruction_loss(
    cap: &CaptionerParams,
    vision: &VisionEncoder,
    images: &Tensor,
    toks: &[SampleTokens],
) -> Result<Tensor> {
    answer_nll(&cap.forward(vision, images, toks)?)
}

/// Captioning loss: instruction loss with an empty instruction, scoring the
/// caption as the answer.
pub fn captioning_loss(
    cap: &CaptionerParams,
    vision: &VisionEncoder,
    images: &Tensor,
    captions: &[crate::data::TokenSeq],
) -> Result<Tensor> {
    let empty = crate::data::TokenSeq { ids: vec![crate::data::EOS] };
    let toks: Vec<SampleTokens> = captions
        .iter()
        .map(|c| SampleTokens::new(&empty, c))
        .collect::<Result<_>>()?;
    instruction_loss(cap, vision, images, &toks)
}

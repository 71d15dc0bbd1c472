//! Evaluation metrics for diagnosis and heart failure prediction.

use alloc::vec;
use alloc::vec::Vec;

use crate::dyngraph::Mask;
use crate::{Error, Result};

/// Indices of the `k` highest scores, ties broken by ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| a.cmp(&b)));
    order.truncate(k);
    order
}

/// Support-weighted mean of per-code F1 scores at a fixed decision
/// threshold (predicted positive when the score exceeds it). Codes with
/// zero ground-truth support carry no weight.
pub fn weighted_f1(scores: &[Vec<f64>], labels: &[Vec<usize>], d: usize, threshold: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::config(alloc::format!("threshold must be in (0, 1), got {threshold}")));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("weighted_f1", "scores and labels differ in length"));
    }
    let mut tp = vec![0usize; d];
    let mut fp = vec![0usize; d];
    let mut fneg = vec![0usize; d];
    for (score, label) in scores.iter().zip(labels) {
        let mut is_label = vec![false; d];
        for &c in label {
            is_label[c] = true;
        }
        for c in 0..d {
            let predicted = score[c] > threshold;
            match (predicted, is_label[c]) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fneg[c] += 1,
                (false, false) => {}
            }
        }
    }
    let total_support: usize = (0..d).map(|c| tp[c] + fneg[c]).sum();
    if total_support == 0 {
        return Err(Error::metric("weighted F1 needs at least one positive label"));
    }
    let mut acc = 0.0;
    for c in 0..d {
        let support = tp[c] + fneg[c];
        if support == 0 {
            continue;
        }
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp[c] as f64 / denom as f64 };
        acc += support as f64 / total_support as f64 * f1;
    }
    Ok(acc)
}

/// Mean over examples of `|top-k intersect labels| / |labels|`.
///
/// Examples with an empty label set are skipped with a warning; the
/// denominator is the full label count even when it exceeds `k`.
pub fn recall_at_k(scores: &[Vec<f64>], labels: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("recall@k needs k >= 1"));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("recall_at_k", "scores and labels differ in length"));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (score, label) in scores.iter().zip(labels) {
        if label.is_empty() {
            log::warn!("recall@{k}: skipping example with empty label set");
            continue;
        }
        let top = top_k_indices(score, k);
        let hits = label.iter().filter(|c| top.contains(c)).count();
        total += hits as f64 / label.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::metric("recall@k has no examples with labels"));
    }
    Ok(total / counted as f64)
}

/// Recall@k split into a persistent part (labels diagnosed at the last
/// feature visit) and an emerging part (the rest). Both parts divide by the
/// *full* label count, so persistent + emerging equals plain recall@k.
pub fn recall_split(
    scores: &[Vec<f64>],
    labels: &[Vec<usize>],
    prev_diagnoses: &[Mask],
    k: usize,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::config("recall@k needs k >= 1"));
    }
    if scores.len() != labels.len() || scores.len() != prev_diagnoses.len() {
        return Err(Error::shape("recall_split", "inputs differ in length"));
    }
    let mut persistent_total = 0.0;
    let mut emerging_total = 0.0;
    let mut counted = 0usize;
    for ((score, label), prev) in scores.iter().zip(labels).zip(prev_diagnoses) {
        if label.is_empty() {
            log::warn!("recall split@{k}: skipping example with empty label set");
            continue;
        }
        let top = top_k_indices(score, k);
        let mut persistent_hits = 0usize;
        let mut emerging_hits = 0usize;
        for c in label {
            if top.contains(c) {
                if prev.get(*c) {
                    persistent_hits += 1;
                } else {
                    emerging_hits += 1;
                }
            }
        }
        persistent_total += persistent_hits as f64 / label.len() as f64;
        emerging_total += emerging_hits as f64 / label.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::metric("recall split has no examples with labels"));
    }
    Ok((persistent_total / counted as f64, emerging_total / counted as f64))
}

/// Rank-based (Mann-Whitney) AUC; tied scores credit half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc_roc", "scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::metric("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tied groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Binary F1 at a fixed threshold (positive when the score exceeds it).
pub fn f1_binary(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_logits(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        [b, k] => Ok((*b, *k)),
        s => Err(Error::shape(format!("logits must be B×K, got {s:?}"))),
    }
}

/// Row-wise softmax computed in `f64`.
pub fn softmax(logits: &[f32], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

/// Mean cross-entropy of `B×K` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (b, k) = check_logits(logits)?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::data(format!("label {l} out of range for {k} classes")));
    }
    let p = softmax(logits.data(), k);
    // log-sum-exp form so a NaN logit surfaces as a NaN loss
    let loss = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| if v as f64 > a || v.is_nan() { v as f64 } else { a });
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            lse - row[l as usize] as f64
        })
        .sum::<f64>()
        / b as f64;
    let labels = labels.to_vec();
    Ok(Tensor::from_op("cross_entropy", vec![loss as f32], vec![], vec![logits.clone()], move |g| {
        let scale = g[0] as f64 / b as f64;
        let mut d: Vec<f32> = p.iter().map(|&v| (v * scale) as f32).collect();
        for (i, &l) in labels.iter().enumerate() {
            d[i * k + l as usize] -= scale as f32;
        }
        vec![Some(d)]
    }))
}

/// Mean Shannon entropy (nats) of the softmax predictions.
pub fn entropy(logits: &Tensor) -> Result<Tensor> {
    let (b, k) = check_logits(logits)?;
    let p = softmax(logits.data(), k);
    let per_row: Vec<f64> = p
        .chunks_exact(k)
        .map(|row| -row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
        .collect();
    let h = per_row.iter().sum::<f64>() / b as f64;
    Ok(Tensor::from_op("entropy", vec![h as f32], vec![], vec![logits.clone()], move |g| {
        let scale = g[0] as f64 / b as f64;
        let mut d = vec![0.0f32; b * k];
        for (i, row) in p.chunks_exact(k).enumerate() {
            for (j, &pj) in row.iter().enumerate() {
                let log_p = if pj > 0.0 { pj.ln() } else { 0.0 };
                d[i * k + j] = (-pj * (log_p + per_row[i]) * scale) as f32;
            }
        }
        vec![Some(d)]
    }))
}

/// Number of rows whose arg-max matches the label.
pub fn correct_count(logits: &Tensor, labels: &[u8]) -> usize {
    let k = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l as usize)
        .count()
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Tensor, labels: &[u8]) -> f64 {
    if labels.is_empty() {
        0.0
    } else {
        correct_count(logits, labels) as f64 / labels.len() as f64
    }
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

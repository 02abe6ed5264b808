use super::{check_len, DiffnetError};

/// Max-shifted softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, DiffnetError> {
    if logits.is_empty() {
        return Err(DiffnetError::Empty);
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(DiffnetError::InvalidTemperature(temperature));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(DiffnetError::NonFinite("softmax logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, DiffnetError> {
    check_len("cosine operand", u.len(), v.len())?;
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(DiffnetError::ZeroNorm);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradient with respect to `u`.
pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>), DiffnetError> {
    check_len("cosine operand", u.len(), v.len())?;
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(DiffnetError::ZeroNorm);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let cos = dot / (nu * nv);
    let grad = u
        .iter()
        .zip(v)
        .map(|(a, b)| b / (nu * nv) - cos * a / (nu * nu))
        .collect();
    Ok((cos, grad))
}

/// `-sum target * log softmax(logits)` and its gradient `softmax - target`.
pub fn cross_entropy(target: &[f64], logits: &[f64]) -> Result<(f64, Vec<f64>), DiffnetError> {
    if logits.is_empty() {
        return Err(DiffnetError::Empty);
    }
    check_len("cross-entropy target", logits.len(), target.len())?;
    if let Some(i) = target.iter().position(|t| *t < 0.0) {
        return Err(DiffnetError::NegativeTarget(i));
    }
    if logits.iter().chain(target).any(|x| !x.is_finite()) {
        return Err(DiffnetError::NonFinite("cross-entropy input"));
    }
    let logp = log_softmax(logits);
    let mass: f64 = target.iter().sum();
    let loss = -target
        .iter()
        .zip(&logp)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| t * lp)
        .sum::<f64>();
    let grad = logp
        .iter()
        .zip(target)
        .map(|(lp, t)| mass * lp.exp() - t)
        .collect();
    Ok((loss, grad))
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if *v <= b => {}
            _ => best = Some((i, *v)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64, DiffnetError> {
    check_len("squared distance operand", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

//! Greedy decoding, streaming through carried block state or by full recomputation.

use super::model::{AudioInput, MacModel};
use crate::blocks::{embed_tokens, lm_forward, ForwardOptions};
use crate::error::Result;
use crate::numerics::{Graph, Tensor};
use crate::ssd::ScanMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// O(1) work per new token through carried conv and SSM state.
    Streaming,
    /// Re-runs the whole prefix for every new token.
    Recompute,
}

fn argmax_last(t: &Tensor) -> usize {
    let (m, _) = t.dims2().expect("logits are 2-D");
    let row = t.row(m - 1);
    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
}

fn stream_options(model: &MacModel) -> ForwardOptions {
    let mut o = model.options;
    if o.mode == ScanMode::Convolutional {
        o.mode = ScanMode::Recurrent;
    }
    o
}

/// Generated ids, excluding the terminating `<eos>`.
pub fn generate_ids(model: &MacModel, audio: &AudioInput, prompt: &str, max_len: usize, mode: DecodeMode) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Ok(Vec::new());
    }
    let plan = model.build_sequence(audio.clone(), prompt, None)?;
    let mut g = Graph::inference();
    let prefix = model.embed_plan(&mut g, &plan)?;
    let prefix = g.value(prefix).clone();
    let eos = model.vocab.eos();
    let sep = Some(model.vocab.separator());
    let mut out = Vec::new();
    match mode {
        DecodeMode::Streaming => {
            let opts = stream_options(model);
            let mut caches = model.lm.new_caches(&model.lm_cfg);
            let mut g = Graph::inference();
            let x = g.constant(prefix);
            let lo = lm_forward(&mut g, &model.lm, &model.lm_cfg, x, opts, Some(&mut caches))?;
            let mut next = argmax_last(g.value(lo.logits));
            while next != eos && out.len() < max_len {
                out.push(next);
                if out.len() == max_len {
                    break;
                }
                let mut g = Graph::inference();
                let x = embed_tokens(&mut g, &model.lm, &[next], sep)?;
                let lo = lm_forward(&mut g, &model.lm, &model.lm_cfg, x, opts, Some(&mut caches))?;
                next = argmax_last(g.value(lo.logits));
            }
        }
        DecodeMode::Recompute => loop {
            let mut g = Graph::inference();
            let p = g.constant(prefix.clone());
            let x = if out.is_empty() {
                p
            } else {
                let gen = embed_tokens(&mut g, &model.lm, &out, sep)?;
                g.concat_rows(&[p, gen])?
            };
            let lo = lm_forward(&mut g, &model.lm, &model.lm_cfg, x, model.options, None)?;
            let next = argmax_last(g.value(lo.logits));
            if next == eos {
                break;
            }
            out.push(next);
            if out.len() == max_len {
                break;
            }
        },
    }
    Ok(out)
}

pub fn generate_greedy(model: &MacModel, audio: &AudioInput, prompt: &str, max_len: usize) -> Result<String> {
    let ids = generate_ids(model, audio, prompt, max_len, DecodeMode::Streaming)?;
    Ok(model.vocab.decode(&ids))
}

/// Bag-of-words F1 between two captions.
pub fn token_f1(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let mut r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() || r.is_empty() {
        return if p.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    let mut overlap = 0usize;
    for w in &p {
        if let Some(i) = r.iter().position(|x| x == w) {
            r.swap_remove(i);
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / reference.split_whitespace().count() as f64;
    2.0 * precision * recall / (precision + recall)
}

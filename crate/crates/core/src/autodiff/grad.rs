//! Reverse-mode gradients over recorded graphs.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use super::array::Array;
use super::node::{no_grad, with_grad, DiffNode};
use crate::error::{Error, Result};

/// Result of [`grad`]: one gradient per requested node.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<DiffNode>,
    /// `true` where the requested node does not influence the output; the
    /// matching gradient is an explicit zero.
    pub unreachable: Vec<bool>,
}

impl Gradients {
    pub fn any_unreachable(&self) -> bool {
        self.unreachable.iter().any(|&u| u)
    }

    pub fn values(&self) -> Vec<Array> {
        self.grads.iter().map(|g| g.value().clone()).collect()
    }
}

/// Gradients of a single-element `output` with respect to `wrt`.
///
/// With `create_graph` the returned nodes are recorded and can be
/// differentiated again; otherwise they are constants.
pub fn grad(output: &DiffNode, wrt: &[DiffNode], create_graph: bool) -> Result<Gradients> {
    if !output.value().is_scalar() {
        return Err(Error::invalid(format!(
            "grad needs a single-element output, got shape {:?}",
            output.shape()
        )));
    }
    let run = || backward(output, wrt);
    if create_graph {
        with_grad(run)
    } else {
        no_grad(run)
    }
}

fn backward(output: &DiffNode, wrt: &[DiffNode]) -> Result<Gradients> {
    let wanted: HashSet<u64> = wrt.iter().filter(|w| w.requires_grad()).map(DiffNode::id).collect();
    let mut found: HashMap<u64, DiffNode> = HashMap::new();

    if output.requires_grad() && !wanted.is_empty() {
        // Ids grow monotonically, so nothing older than the oldest target can
        // depend on a target.
        let min_id = wanted.iter().copied().min().unwrap_or(0);
        let order = relevant_topo_order(output, &wanted, min_id);
        let relevant: HashSet<u64> = order.iter().map(DiffNode::id).collect();

        let mut pending: HashMap<u64, DiffNode> = HashMap::new();
        pending.insert(output.id(), DiffNode::constant(Array::full(output.shape(), 1.0)?));

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if wanted.contains(&node.id()) {
                found.insert(node.id(), g.clone());
            }
            let Some(bw) = node.0.backward.as_ref() else {
                continue;
            };
            let parents = &node.0.parents;
            let need: Vec<bool> = parents
                .iter()
                .map(|p| p.requires_grad() && relevant.contains(&p.id()))
                .collect();
            if !need.iter().any(|&n| n) {
                continue;
            }
            let contribs = bw(&g, parents, &need)?;
            for ((p, c), &n) in parents.iter().zip(contribs).zip(&need) {
                let (Some(c), true) = (c, n) else { continue };
                let acc = match pending.remove(&p.id()) {
                    Some(prev) => prev.add(&c)?,
                    None => c,
                };
                pending.insert(p.id(), acc);
            }
        }
    }

    let mut grads = Vec::with_capacity(wrt.len());
    let mut unreachable = Vec::with_capacity(wrt.len());
    for w in wrt {
        match found.get(&w.id()) {
            Some(g) => {
                grads.push(g.clone());
                unreachable.push(false);
            }
            None => {
                grads.push(DiffNode::constant(Array::zeros(w.shape())?));
                unreachable.push(true);
            }
        }
    }
    if unreachable.iter().any(|&u| u) {
        log::warn!("grad: {} requested node(s) do not reach the output", unreachable.iter().filter(|&&u| u).count());
    }
    Ok(Gradients { grads, unreachable })
}

/// Post-order of nodes that require grad and lie on a path from `output`
/// to one of the `wanted` nodes.
fn relevant_topo_order(output: &DiffNode, wanted: &HashSet<u64>, min_id: u64) -> Vec<DiffNode> {
    // state: visited set + relevance verdict per visited node
    let mut verdict: HashMap<u64, bool> = HashMap::new();
    let mut order = Vec::new();
    let mut stack: Vec<(DiffNode, usize)> = vec![(output.clone(), 0)];
    verdict.insert(output.id(), false);

    while let Some((node, idx)) = stack.pop() {
        let parents = &node.0.parents;
        if idx < parents.len() {
            let p = parents[idx].clone();
            stack.push((node, idx + 1));
            if p.requires_grad() && p.id() >= min_id && !verdict.contains_key(&p.id()) {
                verdict.insert(p.id(), false);
                stack.push((p, 0));
            }
            continue;
        }
        let relevant = wanted.contains(&node.id())
            || parents
                .iter()
                .any(|p| verdict.get(&p.id()).copied().unwrap_or(false));
        verdict.insert(node.id(), relevant);
        if relevant {
            order.push(node);
        }
    }
    order
}

/// Analytic versus central-difference gradient comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub analytic: Array,
    pub numeric: Array,
    pub max_rel_error: f64,
}

impl GradientReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare reverse-mode gradients of `f` at `point` with central differences.
///
/// `f` maps parameter nodes to a single-element node and must be a pure
/// function of its inputs (seed any randomness inside it).
pub fn check_gradient<F>(f: F, point: &[Array], h: f64) -> Result<GradientReport>
where
    F: Fn(&[DiffNode]) -> Result<DiffNode>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let leaves: Vec<DiffNode> = point.iter().map(|a| DiffNode::leaf(a.clone(), true)).collect();
    let out = with_grad(|| f(&leaves))?;
    if !out.item().is_finite() {
        return Err(Error::NumericInstability("objective is not finite at the base point".into()));
    }
    let g = grad(&out, &leaves, false)?;
    let analytic: Vec<f64> = g.grads.iter().flat_map(|n| n.value().to_vec()).collect();

    let eval = |params: &[Array]| -> Result<f64> {
        let nodes: Vec<DiffNode> = params.iter().cloned().map(DiffNode::constant).collect();
        let v = no_grad(|| f(&nodes))?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericInstability("objective is not finite under perturbation".into()))
        }
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut params = point.to_vec();
    for (pi, base) in point.iter().enumerate() {
        for k in 0..base.len() {
            let mut plus = base.to_vec();
            plus[k] += h;
            let mut minus = base.to_vec();
            minus[k] -= h;
            params[pi] = Array::new(base.shape().to_vec(), plus)?;
            let fp = eval(&params)?;
            params[pi] = Array::new(base.shape().to_vec(), minus)?;
            let fm = eval(&params)?;
            numeric.push((fp - fm) / (2.0 * h));
        }
        params[pi] = base.clone();
    }

    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradientReport {
        analytic: Array::vector(analytic),
        numeric: Array::vector(numeric),
        max_rel_error,
    })
}

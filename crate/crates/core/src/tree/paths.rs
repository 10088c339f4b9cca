//! Path probabilities and leaf aggregation on plain tensors.

use acnet_numeric::Tensor;

use super::config::{internal_count, leaf_count, node_count, NodeId};
use crate::error::{AcnetError, Result};

/// Tolerance on gates leaving `[0, 1]` and on leaf mass not summing to 1.
pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

/// Accumulated probability of every node (level order) from the gates of
/// the internal nodes (level order, each `[N]`). A gate is the probability
/// of the left child; `batch` is the sample count N.
pub fn accumulate_path_probabilities(height: usize, batch: usize, gates: &[Tensor]) -> Result<Vec<Tensor>> {
    if height == 0 {
        return Err(AcnetError::Config("tree height must be at least 1".into()));
    }
    if gates.len() != internal_count(height) {
        return Err(AcnetError::Input(format!(
            "height {height} has {} internal nodes, got {} gate vectors",
            internal_count(height),
            gates.len()
        )));
    }
    let n = batch;
    for (i, g) in gates.iter().enumerate() {
        if g.shape() != [n] {
            return Err(AcnetError::Input(format!("gate {i} has shape {:?}, expected [{n}]", g.shape())));
        }
        if let Some(v) = g
            .data()
            .iter()
            .find(|v| !(-PROBABILITY_TOLERANCE..=1.0 + PROBABILITY_TOLERANCE).contains(*v))
        {
            return Err(AcnetError::Numeric(format!(
                "gate of node {} is {v}, outside [0, 1]",
                NodeId::from_flat(i)
            )));
        }
    }
    let mut r = vec![Tensor::ones(&[n]); node_count(height)];
    for (i, g) in gates.iter().enumerate() {
        let node = NodeId::from_flat(i);
        let parent = r[i].clone();
        let left = Tensor::from_fn(&[n], |j| parent.data()[j] * g.data()[j]);
        let right = Tensor::from_fn(&[n], |j| parent.data()[j] * (1.0 - g.data()[j]));
        r[node.left().flat()] = left;
        r[node.right().flat()] = right;
    }
    Ok(r)
}

/// `C = Σ_i P_i · r_i` over the leaves.
pub fn aggregate(leaf_probs: &[Tensor], leaf_r: &[Tensor]) -> Result<Tensor> {
    if leaf_probs.is_empty() || leaf_probs.len() != leaf_r.len() {
        return Err(AcnetError::Input(format!(
            "need matching non-empty leaf lists, got {} distributions and {} probabilities",
            leaf_probs.len(),
            leaf_r.len()
        )));
    }
    if !leaf_probs.len().is_power_of_two() {
        return Err(AcnetError::Input(format!("{} leaves do not form a full binary tree", leaf_probs.len())));
    }
    let shape = leaf_probs[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(AcnetError::Input(format!("leaf distributions must be [N, K], got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    for (p, r) in leaf_probs.iter().zip(leaf_r) {
        if p.shape() != shape.as_slice() || r.shape() != [n] {
            return Err(AcnetError::Input("leaf distributions or probabilities have mismatched shapes".into()));
        }
    }
    for s in 0..n {
        let total: f64 = leaf_r.iter().map(|r| r.data()[s]).sum();
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(AcnetError::Numeric(format!("leaf probabilities of sample {s} sum to {total}")));
        }
    }
    let mut out = Tensor::zeros(&[n, k]);
    for (p, r) in leaf_probs.iter().zip(leaf_r) {
        for s in 0..n {
            let w = r.data()[s];
            for c in 0..k {
                out.data_mut()[s * k + c] += w * p.data()[s * k + c];
            }
        }
    }
    Ok(out)
}

/// Leaf entries of a level-ordered per-node list.
pub fn leaf_slice<T>(height: usize, per_node: &[T]) -> &[T] {
    &per_node[internal_count(height)..internal_count(height) + leaf_count(height)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gates(values: &[f64]) -> Vec<Tensor> {
        values.iter().map(|&g| Tensor::new(vec![1], vec![g]).unwrap()).collect()
    }

    fn leaves(height: usize, g: &[f64]) -> Vec<f64> {
        let r = accumulate_path_probabilities(height, 1, &gates(g)).unwrap();
        leaf_slice(height, &r).iter().map(|t| t.data()[0]).collect()
    }

    #[test]
    fn uniform_gates_split_evenly() {
        assert_eq!(leaves(3, &[0.5; 3]), vec![0.25; 4]);
    }

    #[test]
    fn height_two() {
        let l = leaves(2, &[0.7]);
        assert!((l[0] - 0.7).abs() < 1e-15 && (l[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn height_one_has_unit_root() {
        assert_eq!(leaves(1, &[]), vec![1.0]);
    }

    #[test]
    fn gate_out_of_range_is_numeric_error() {
        let err = accumulate_path_probabilities(2, 1, &gates(&[1.1])).unwrap_err();
        assert!(matches!(err, AcnetError::Numeric(_)));
        assert!(accumulate_path_probabilities(2, 1, &gates(&[1.0 + 5e-7])).is_ok());
    }

    #[test]
    fn aggregate_two_leaves() {
        let p1 = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p2 = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let c = aggregate(&[p1, p2], &gates(&[0.7, 0.3])).unwrap();
        assert!((c.data()[0] - 0.7).abs() < 1e-15 && (c.data()[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn aggregate_single_leaf_is_identity() {
        let p = Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        let c = aggregate(std::slice::from_ref(&p), &[Tensor::ones(&[2])]).unwrap();
        assert_eq!(c, p);
    }

    #[test]
    fn aggregate_rejects_unnormalized_leaf_mass() {
        let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let err = aggregate(&[p.clone(), p], &gates(&[0.7, 0.4])).unwrap_err();
        assert!(matches!(err, AcnetError::Numeric(_)));
    }
}

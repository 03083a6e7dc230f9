use std::collections::VecDeque;

use crate::error::{Error, Result};

/// A past embedding together with its class weight column at the time it
/// was stored.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub label: usize,
    pub snapshot_weight: Vec<f64>,
}

/// Bounded FIFO of detached embeddings used by BroadFace.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize) -> Self {
        EmbeddingQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Embedding dimension of the stored entries, if any.
    pub fn dim(&self) -> Option<usize> {
        self.entries.front().map(|e| e.embedding.len())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Appends `entry`, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, entry: QueueEntry) -> Result<()> {
        if entry.embedding.len() != entry.snapshot_weight.len() {
            return Err(Error::State(format!(
                "queue entry embedding has {} dims but its weight snapshot has {}",
                entry.embedding.len(),
                entry.snapshot_weight.len()
            )));
        }
        if let Some(d) = self.dim() {
            if d != entry.embedding.len() {
                return Err(Error::State(format!(
                    "queue holds {d}-dim embeddings, cannot add a {}-dim one",
                    entry.embedding.len()
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Corrects a stale embedding for the drift of its class weight since it
/// was queued: `b* = b + |b| / |W_snapshot| * (W_current - W_snapshot)`.
pub fn compensate(entry: &QueueEntry, current_weight: &[f64]) -> Result<Vec<f64>> {
    if current_weight.len() != entry.snapshot_weight.len() {
        return Err(Error::State(format!(
            "current weight column has {} dims, snapshot has {}",
            current_weight.len(),
            entry.snapshot_weight.len()
        )));
    }
    let snap_norm = norm(&entry.snapshot_weight);
    if snap_norm == 0.0 {
        return Err(Error::Degenerate(
            "queued weight snapshot has zero norm".into(),
        ));
    }
    let ratio = norm(&entry.embedding) / snap_norm;
    Ok(entry
        .embedding
        .iter()
        .zip(current_weight.iter().zip(&entry.snapshot_weight))
        .map(|(b, (w, w0))| b + ratio * (w - w0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(embedding: Vec<f64>, label: usize, snapshot: Vec<f64>) -> QueueEntry {
        QueueEntry {
            embedding,
            label,
            snapshot_weight: snapshot,
        }
    }

    #[test]
    fn static_weights_leave_embedding_unchanged() {
        let e = entry(vec![0.3, -0.2, 0.9], 1, vec![1.0, 2.0, -0.5]);
        assert_eq!(compensate(&e, &[1.0, 2.0, -0.5]).unwrap(), e.embedding);
    }

    #[test]
    fn rotated_weight_moves_embedding() {
        let e = entry(vec![1.0, 0.0], 0, vec![1.0, 0.0]);
        let b = compensate(&e, &[0.0, 1.0]).unwrap();
        assert!((b[0] - 0.0).abs() < 1e-15 && (b[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn correction_is_homogeneous_in_embedding() {
        let e = entry(vec![0.4, -0.3], 0, vec![0.5, 0.5]);
        let w = [0.2, 0.9];
        let base = compensate(&e, &w).unwrap();
        let c = 3.5;
        let scaled = entry(e.embedding.iter().map(|x| x * c).collect(), 0, e.snapshot_weight.clone());
        let out = compensate(&scaled, &w).unwrap();
        for k in 0..2 {
            let corr = base[k] - e.embedding[k];
            let corr_scaled = out[k] - scaled.embedding[k];
            assert!((corr_scaled - c * corr).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_snapshot_is_degenerate() {
        let e = entry(vec![1.0, 0.0], 0, vec![0.0, 0.0]);
        assert!(matches!(compensate(&e, &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fifo_eviction() {
        let mut q = EmbeddingQueue::new(3);
        for i in 0..5 {
            q.push(entry(vec![i as f64], i, vec![1.0])).unwrap();
        }
        let labels: Vec<usize> = q.iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![2, 3, 4]);
        assert!(matches!(
            q.push(entry(vec![1.0, 2.0], 0, vec![1.0, 1.0])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_capacity_stores_nothing() {
        let mut q = EmbeddingQueue::new(0);
        q.push(entry(vec![1.0], 0, vec![1.0])).unwrap();
        assert!(q.is_empty());
    }
}

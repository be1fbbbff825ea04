//! Dense row-major storage for time-frequency quantities.

use std::ops::{Index, IndexMut};

use crate::error::{shape, Result};

/// A `frames × bins` matrix stored row-major (one row per STFT frame).
#[derive(Clone, Debug, PartialEq)]
pub struct TfGrid<T> {
    frames: usize,
    bins: usize,
    data: Vec<T>,
}

impl<T: Clone> TfGrid<T> {
    pub fn filled(frames: usize, bins: usize, value: T) -> Self {
        Self {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }
}

impl<T> TfGrid<T> {
    pub fn from_vec(frames: usize, bins: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * bins {
            return shape(format!(
                "{} values cannot fill a {frames}x{bins} grid",
                data.len()
            ));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn from_fn(frames: usize, bins: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(frames * bins);
        for t in 0..frames {
            for k in 0..bins {
                data.push(f(t, k));
            }
        }
        Self { frames, bins, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> TfGrid<U> {
        TfGrid {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &TfGrid<U>) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_shape<U>(&self, other: &TfGrid<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ))
        }
    }

    pub fn zip_map<U, V>(&self, other: &TfGrid<U>, mut f: impl FnMut(&T, &U) -> V) -> Result<TfGrid<V>> {
        self.check_shape(other, "zip_map")?;
        Ok(TfGrid {
            frames: self.frames,
            bins: self.bins,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| f(a, b))
                .collect(),
        })
    }
}

impl<T> Index<(usize, usize)> for TfGrid<T> {
    type Output = T;

    fn index(&self, (t, k): (usize, usize)) -> &T {
        debug_assert!(t < self.frames && k < self.bins);
        &self.data[t * self.bins + k]
    }
}

impl<T> IndexMut<(usize, usize)> for TfGrid<T> {
    fn index_mut(&mut self, (t, k): (usize, usize)) -> &mut T {
        debug_assert!(t < self.frames && k < self.bins);
        &mut self.data[t * self.bins + k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(TfGrid::from_vec(2, 3, vec![0.0; 5]).is_err());
        let g = TfGrid::from_vec(2, 3, (0..6).collect::<Vec<_>>()).unwrap();
        assert_eq!(g[(1, 0)], 3);
        assert_eq!(g.row(1), &[3, 4, 5]);
    }

    #[test]
    fn zip_map_checks_shape() {
        let a = TfGrid::filled(2, 2, 1.0);
        let b = TfGrid::filled(2, 3, 1.0);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
        let c = a.zip_map(&a, |x, y| x + y).unwrap();
        assert!(c.iter().all(|&v| v == 2.0));
    }
}

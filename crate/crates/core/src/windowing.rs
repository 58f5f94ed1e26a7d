//! Non-overlapping square window partition of BEV maps and its inverse.
//!
//! Windows are ordered row-major over the window grid, tokens row-major
//! inside each window. There is no padding: the window side must divide both
//! map dimensions.

use crate::error::{Error, Result};
use crate::tensor::{BevMap, Modality, Tensor};

/// Map size and window side needed to undo a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub channels: usize,
}

impl WindowGeometry {
    pub fn new(height: usize, width: usize, window: usize, channels: usize) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(Error::WindowSize {
                height,
                width,
                window,
            });
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::contract("window_geometry", "empty map"));
        }
        Ok(Self {
            height,
            width,
            window,
            channels,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn token_shape(&self) -> [usize; 3] {
        [self.num_windows(), self.tokens_per_window(), self.channels]
    }

    pub fn map_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Map pixel `(y, x)` of window `win`, token `tok`.
    pub fn pixel_of(&self, win: usize, tok: usize) -> (usize, usize) {
        let per_row = self.width / self.window;
        let (wy, wx) = (win / per_row, win % per_row);
        let (ty, tx) = (tok / self.window, tok % self.window);
        (wy * self.window + ty, wx * self.window + tx)
    }

    /// For each element of the window-token layout, its flat offset in the map.
    pub fn partition_index(&self) -> Vec<usize> {
        let c = self.channels;
        let mut idx = Vec::with_capacity(self.height * self.width * c);
        for win in 0..self.num_windows() {
            for tok in 0..self.tokens_per_window() {
                let (y, x) = self.pixel_of(win, tok);
                let base = (y * self.width + x) * c;
                idx.extend(base..base + c);
            }
        }
        idx
    }

    /// For each map element, its flat offset in the window-token layout.
    pub fn merge_index(&self) -> Vec<usize> {
        let part = self.partition_index();
        let mut inv = vec![0; part.len()];
        for (tok_off, &map_off) in part.iter().enumerate() {
            inv[map_off] = tok_off;
        }
        inv
    }
}

/// Window tokens `[N_win, h·h, C]` plus the geometry they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    tokens: Tensor,
    geometry: WindowGeometry,
}

impl WindowSet {
    pub fn new(tokens: Tensor, geometry: WindowGeometry) -> Result<Self> {
        if tokens.shape() != geometry.token_shape() {
            return Err(Error::contract(
                "window_set",
                format!(
                    "tokens {:?} inconsistent with geometry {:?}",
                    tokens.shape(),
                    geometry
                ),
            ));
        }
        Ok(Self { tokens, geometry })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn geometry(&self) -> WindowGeometry {
        self.geometry
    }

    pub fn num_windows(&self) -> usize {
        self.geometry.num_windows()
    }

    /// Tokens of one window as a `[T, C]` tensor.
    pub fn window(&self, i: usize) -> Tensor {
        let [_, t, c] = self.geometry.token_shape();
        let d = &self.tokens.data()[i * t * c..(i + 1) * t * c];
        Tensor::new(vec![t, c], d.to_vec()).expect("window slice")
    }

    /// Rebuilds a set from per-window `[T, C]` tensors.
    pub fn from_windows(windows: &[Tensor], geometry: WindowGeometry) -> Result<Self> {
        let mut data = Vec::with_capacity(geometry.height * geometry.width * geometry.channels);
        for w in windows {
            data.extend_from_slice(w.data());
        }
        let tokens = Tensor::new(geometry.token_shape().to_vec(), data)
            .map_err(|e| Error::contract("window_set", e.to_string()))?;
        Self::new(tokens, geometry)
    }
}

pub fn partition(f: &BevMap, window: usize) -> Result<WindowSet> {
    let geometry = WindowGeometry::new(f.height(), f.width(), window, f.channels())?;
    let src = f.tensor().data();
    let data = geometry.partition_index().into_iter().map(|i| src[i]).collect();
    WindowSet::new(Tensor::new(geometry.token_shape().to_vec(), data)?, geometry)
}

pub fn merge(ws: &WindowSet, modality: Modality) -> Result<BevMap> {
    let g = ws.geometry;
    if ws.tokens.shape() != g.token_shape() {
        return Err(Error::contract("merge", "tokens inconsistent with geometry"));
    }
    let src = ws.tokens.data();
    let data = g.merge_index().into_iter().map(|i| src[i]).collect();
    BevMap::new(Tensor::new(g.map_shape().to_vec(), data)?, modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, c: usize) -> BevMap {
        BevMap::new(Tensor::from_fn(&[h, w, c], |i| i as f64), Modality::Camera).unwrap()
    }

    #[test]
    fn unit_windows_follow_row_major_order() {
        let f = BevMap::new(
            Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Modality::Camera,
        )
        .unwrap();
        let ws = partition(&f, 1).unwrap();
        assert_eq!(ws.tokens().shape(), &[4, 1, 1]);
        assert_eq!(ws.tokens().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_window_is_whole_map() {
        let f = map(4, 4, 2);
        let ws = partition(&f, 4).unwrap();
        assert_eq!(ws.tokens().shape(), &[1, 16, 2]);
        assert_eq!(ws.tokens().data(), f.tensor().data());
    }

    #[test]
    fn first_window_token_order() {
        let f = map(4, 4, 1);
        let ws = partition(&f, 2).unwrap();
        // positions (0,0),(0,1),(1,0),(1,1) → flat 0,1,4,5
        assert_eq!(&ws.tokens().data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&ws.tokens().data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn non_divisible_is_rejected() {
        let f = map(6, 4, 1);
        assert!(matches!(partition(&f, 4), Err(Error::WindowSize { .. })));
        assert!(matches!(partition(&f, 0), Err(Error::WindowSize { .. })));
    }

    #[test]
    fn merge_inverts_partition() {
        let f = map(8, 8, 4);
        for h in [1, 2, 4, 8] {
            let back = merge(&partition(&f, h).unwrap(), Modality::Camera).unwrap();
            assert!(back.tensor().bit_eq(f.tensor()));
        }
    }

    #[test]
    fn merge_is_order_sensitive() {
        let f = map(4, 4, 1);
        let ws = partition(&f, 2).unwrap();
        let mut wins: Vec<Tensor> = (0..ws.num_windows()).map(|i| ws.window(i)).collect();
        wins.swap(0, 3);
        let swapped = WindowSet::from_windows(&wins, ws.geometry()).unwrap();
        let back = merge(&swapped, Modality::Camera).unwrap();
        assert!(!back.tensor().bit_eq(f.tensor()));
    }

    #[test]
    fn inconsistent_tokens_rejected() {
        let g = WindowGeometry::new(4, 4, 2, 1).unwrap();
        assert!(WindowSet::new(Tensor::zeros(&[3, 4, 1]), g).is_err());
    }
}

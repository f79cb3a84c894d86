use crate::error::{Error, Result};
use crate::tensor::{crop, Graph, NodeId, Scalar, Tensor};

/// Disjoint `grid x grid` tiling of an `H x W` map, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub grid: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    pub fn new(grid: usize, h: usize, w: usize) -> Result<Self> {
        if grid == 0 || h % grid != 0 || w % grid != 0 {
            return Err(Error::invalid(
                "patch_grid",
                format!("{h}x{w} map is not divisible into a {grid}x{grid} grid"),
            ));
        }
        Ok(Self {
            grid,
            patch_h: h / grid,
            patch_w: w / grid,
        })
    }

    pub fn len(&self) -> usize {
        self.grid * self.grid
    }

    pub fn is_empty(&self) -> bool {
        self.grid == 0
    }

    /// Top-left corner of every patch, row-major.
    pub fn coords(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .map(|i| ((i / self.grid) * self.patch_h, (i % self.grid) * self.patch_w))
            .collect()
    }

    pub fn extract<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<Vec<NodeId>> {
        self.check(g.value(x))?;
        self.coords()
            .into_iter()
            .map(|(top, left)| g.crop(x, top, left, self.patch_h, self.patch_w))
            .collect()
    }

    pub fn merge<T: Scalar>(&self, g: &mut Graph<T>, parts: &[NodeId]) -> Result<NodeId> {
        g.merge_patches(parts, self.grid)
    }

    fn check<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) != (self.patch_h * self.grid, self.patch_w * self.grid) {
            return Err(Error::invalid(
                "extract_patches",
                format!(
                    "{h}x{w} map does not match a {g}x{g} grid of {}x{} patches",
                    self.patch_h,
                    self.patch_w,
                    g = self.grid
                ),
            ));
        }
        Ok(())
    }
}

/// `grid^2` tensors of shape `(N, C, H/grid, W/grid)`, row-major.
pub fn extract_patches<T: Scalar>(x: &Tensor<T>, grid: usize) -> Result<Vec<Tensor<T>>> {
    let (_, _, h, w) = x.dims4()?;
    let pg = PatchGrid::new(grid, h, w)?;
    pg.coords()
        .into_iter()
        .map(|(top, left)| crop(x, top, left, pg.patch_h, pg.patch_w))
        .collect()
}

/// Inverse of [`extract_patches`].
pub fn merge_patches<T: Scalar>(patches: &[Tensor<T>], grid: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new(crate::tensor::Mode::Eval);
    let ids: Vec<_> = patches.iter().map(|p| g.input(p.clone())).collect();
    let out = g.merge_patches(&ids, grid)?;
    Ok(g.value(out).clone())
}

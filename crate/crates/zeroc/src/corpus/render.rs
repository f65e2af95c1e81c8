//! Image renderers for the two domains: one-hot color planes at native
//! resolution (domain 1), and a deterministic RGB render at 2x resolution
//! with a fixed palette and shading pattern (domain 2).

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};

use crate::{Result, ZcError};

use super::Grid;

/// Fixed palette mapping color ids 0..=9 to RGB in [0,1].
const PALETTE: [[f32; 3]; 10] = [
    [0.08, 0.08, 0.10], // background
    [0.90, 0.12, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.80, 0.10],
    [0.70, 0.15, 0.85],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.10],
    [0.85, 0.85, 0.85],
    [0.55, 0.35, 0.15],
];

/// Per-subpixel brightness of the 2x2 block a cell expands to; a fixed
/// top-left-lit shading pattern that gives domain 2 its distribution shift.
const SHADING: [[f32; 2]; 2] = [[1.00, 0.86], [0.90, 0.72]];

pub fn upscale_factor(domain: u8) -> usize {
    if domain == 2 {
        2
    } else {
        1
    }
}

/// Number of image channels per domain.
pub fn domain_channels(domain: u8) -> usize {
    if domain == 2 {
        3
    } else {
        10
    }
}

/// Render a grid to an image tensor: domain 1 -> (10, H, W) one-hot,
/// domain 2 -> (3, 2H, 2W) palette + shading.
pub fn render_domain(grid: &Grid, domain: u8) -> Result<Tensor> {
    let (h, w) = (grid.height, grid.width);
    match domain {
        1 => {
            let mut data = vec![0f32; 10 * h * w];
            for r in 0..h {
                for c in 0..w {
                    let color = grid.get(r, c) as usize;
                    data[color * h * w + r * w + c] = 1.0;
                }
            }
            Ok(Tensor::from_vec(data, (10, h, w), &Device::Cpu)?)
        }
        2 => {
            let (h2, w2) = (2 * h, 2 * w);
            let mut data = vec![0f32; 3 * h2 * w2];
            for r in 0..h {
                for c in 0..w {
                    let rgb = PALETTE[grid.get(r, c) as usize];
                    for (dr, row) in SHADING.iter().enumerate() {
                        for (dc, &shade) in row.iter().enumerate() {
                            let (rr, cc) = (2 * r + dr, 2 * c + dc);
                            for (ch, &v) in rgb.iter().enumerate() {
                                data[ch * h2 * w2 + rr * w2 + cc] = v * shade;
                            }
                        }
                    }
                }
            }
            Ok(Tensor::from_vec(data, (3, h2, w2), &Device::Cpu)?)
        }
        other => Err(ZcError::Contract(format!("unknown domain {other}"))),
    }
}

/// Binary mask tensor (1, sH, sW) for a pixel set, upscaled to match the
/// domain's image resolution.
pub fn mask_to_tensor(
    pixels: &BTreeSet<(usize, usize)>,
    h: usize,
    w: usize,
    domain: u8,
) -> Result<Tensor> {
    let s = upscale_factor(domain);
    let (hs, ws) = (s * h, s * w);
    let mut data = vec![0f32; hs * ws];
    for &(r, c) in pixels {
        if r >= h || c >= w {
            return Err(ZcError::Contract(format!(
                "mask pixel ({r},{c}) outside {h}x{w}"
            )));
        }
        for dr in 0..s {
            for dc in 0..s {
                data[(s * r + dr) * ws + (s * c + dc)] = 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, hs, ws), &Device::Cpu)?)
}

/// Decode an image from either domain back to a grid. Domain 2 reads the
/// unshaded top-left subpixel of each 2x2 block and snaps it to the
/// nearest palette color.
pub fn grid_from_image(img: &Tensor, domain: u8) -> Result<Grid> {
    match domain {
        1 => grid_from_onehot(img),
        2 => {
            let (ch, h2, w2) = img.dims3()?;
            if ch != 3 || h2 % 2 != 0 || w2 % 2 != 0 {
                return Err(ZcError::Contract(format!(
                    "domain-2 image must be (3, 2H, 2W), got ({ch}, {h2}, {w2})"
                )));
            }
            let data = img.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let (h, w) = (h2 / 2, w2 / 2);
            let mut grid = Grid::new(h, w)?;
            for r in 0..h {
                for c in 0..w {
                    let rgb: Vec<f32> = (0..3)
                        .map(|k| data[k * h2 * w2 + 2 * r * w2 + 2 * c])
                        .collect();
                    let mut best = (0usize, f32::INFINITY);
                    for (color, p) in PALETTE.iter().enumerate() {
                        let d: f32 = (0..3).map(|k| (rgb[k] - p[k]).powi(2)).sum();
                        if d < best.1 {
                            best = (color, d);
                        }
                    }
                    grid.set(r, c, best.0 as u8)?;
                }
            }
            Ok(grid)
        }
        other => Err(ZcError::Contract(format!("unknown domain {other}"))),
    }
}

/// One-hot image back to a grid; used by tests and plotting.
pub fn grid_from_onehot(img: &Tensor) -> Result<Grid> {
    let (ch, h, w) = img.dims3()?;
    if ch != 10 {
        return Err(ZcError::Contract(format!("expected 10 channels, got {ch}")));
    }
    let data = img.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut grid = Grid::new(h, w)?;
    for r in 0..h {
        for c in 0..w {
            let mut best = (0usize, f32::NEG_INFINITY);
            for k in 0..10 {
                let v = data[k * h * w + r * w + c];
                if v > best.1 {
                    best = (k, v);
                }
            }
            grid.set(r, c, best.0 as u8)?;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_all_background_in_domain_1() {
        let g = Grid::new(8, 8).unwrap();
        let img = render_domain(&g, 1).unwrap();
        let v = img.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v[..64].iter().all(|&x| x == 1.0));
        assert!(v[64..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_cell_sets_exactly_one_onehot_position() {
        let mut g = Grid::new(8, 8).unwrap();
        g.set(2, 5, 1).unwrap();
        let img = render_domain(&g, 1).unwrap();
        let v = img.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let red: Vec<usize> = (64..128).filter(|&i| v[i] == 1.0).collect();
        assert_eq!(red, vec![64 + 2 * 8 + 5]);
        assert_eq!(v[2 * 8 + 5], 0.0); // background channel cleared there
    }

    #[test]
    fn domain_2_is_deterministic_and_double_resolution() {
        let mut g = Grid::new(8, 8).unwrap();
        g.set(0, 0, 3).unwrap();
        let a = render_domain(&g, 2).unwrap();
        let b = render_domain(&g, 2).unwrap();
        assert_eq!(a.dims(), &[3, 16, 16]);
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn onehot_round_trips_through_grid() {
        let mut g = Grid::new(8, 10).unwrap();
        g.set(1, 2, 7).unwrap();
        g.set(7, 9, 4).unwrap();
        let back = grid_from_onehot(&render_domain(&g, 1).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn masks_upscale_with_the_domain() {
        let mut px = BTreeSet::new();
        px.insert((1usize, 1usize));
        let m1 = mask_to_tensor(&px, 8, 8, 1).unwrap();
        assert_eq!(m1.dims(), &[1, 8, 8]);
        assert_eq!(m1.sum_all().unwrap().to_scalar::<f32>().unwrap(), 1.0);
        let m2 = mask_to_tensor(&px, 8, 8, 2).unwrap();
        assert_eq!(m2.dims(), &[1, 16, 16]);
        assert_eq!(m2.sum_all().unwrap().to_scalar::<f32>().unwrap(), 4.0);
    }
}

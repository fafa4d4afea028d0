//! Cartesian bird's-eye views of polar masks. Both the grey-level PGM and
//! the colour PPM go through [`cartesian_cells`].

use crate::dsp::{polar_to_cartesian, CartesianGrid, DspError, Interp, PolarGrid};
use crate::model::PolarMask;

/// Grey level of Cartesian cells outside the field of view.
pub const OUTSIDE_GRAY: u8 = 128;
pub const OPEN_RGB: [u8; 3] = [0, 200, 0];
pub const OCCUPIED_RGB: [u8; 3] = [200, 0, 0];
pub const OUTSIDE_RGB: [u8; 3] = [0, 0, 0];

/// Polar grid matching a mask of any size with the default sensor spacing.
pub fn polar_grid_for(mask: &PolarMask) -> PolarGrid {
    let base = PolarGrid::default();
    PolarGrid {
        range_bins: mask.rows(),
        cols: mask.cols(),
        angle_step_deg: base.angle_step_deg * (base.cols - 1) as f64 / (mask.cols().max(2) - 1) as f64,
        ..base
    }
}

/// Nearest-neighbour lookup of every Cartesian cell: `Some(1)` open,
/// `Some(0)` occupied, `None` outside the polar wedge.
pub fn cartesian_cells(mask: &PolarMask, cart: &CartesianGrid) -> Result<Vec<Option<u8>>, DspError> {
    let src: Vec<f64> = mask.data().iter().map(|&v| f64::from(v)).collect();
    let out = polar_to_cartesian(&src, &polar_grid_for(mask), cart, Interp::Nearest, f64::NAN)?;
    Ok(out.into_iter().map(|v| (!v.is_nan()).then_some(v as u8)).collect())
}

/// 255 open, 0 occupied, [`OUTSIDE_GRAY`] outside.
pub fn cartesian_gray(mask: &PolarMask, cart: &CartesianGrid) -> Result<Vec<u8>, DspError> {
    Ok(cartesian_cells(mask, cart)?
        .into_iter()
        .map(|c| match c {
            Some(1) => 255,
            Some(_) => 0,
            None => OUTSIDE_GRAY,
        })
        .collect())
}

pub fn cartesian_rgb(mask: &PolarMask, cart: &CartesianGrid) -> Result<Vec<[u8; 3]>, DspError> {
    Ok(cartesian_cells(mask, cart)?
        .into_iter()
        .map(|c| match c {
            Some(1) => OPEN_RGB,
            Some(_) => OCCUPIED_RGB,
            None => OUTSIDE_RGB,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_and_colour_agree_cell_for_cell() {
        let mut mask = PolarMask::filled(128, 128, true);
        for c in 0..128 {
            for r in 40 + c / 4..128 {
                mask.set(r, c, false);
            }
        }
        let cart = CartesianGrid::default();
        let gray = cartesian_gray(&mask, &cart).unwrap();
        let rgb = cartesian_rgb(&mask, &cart).unwrap();
        for (g, p) in gray.iter().zip(&rgb) {
            let expect = match g {
                255 => OPEN_RGB,
                0 => OCCUPIED_RGB,
                _ => OUTSIDE_RGB,
            };
            assert_eq!(*p, expect);
        }
        let outside = gray.iter().filter(|&&g| g == OUTSIDE_GRAY).count();
        assert!(outside > 0 && outside < gray.len() / 2);
        assert!(gray.contains(&255) && gray.contains(&0));
    }

    #[test]
    fn default_grid_matches_sensor_grid() {
        assert_eq!(polar_grid_for(&PolarMask::filled(128, 128, true)), PolarGrid::default());
    }
}

//! RGB/HSV conversion and the per-object hue rotation table.

/// Hue shifts in degrees; every entry is at least 90° away from identity so a
/// recolored object is visibly distinct from its parent.
pub const HUE_SHIFT_TABLE: [f64; 7] = [120.0, 180.0, 240.0, 150.0, 210.0, 90.0, 270.0];

pub fn hue_shift_for(uid: u64) -> f64 {
    HUE_SHIFT_TABLE[(uid % HUE_SHIFT_TABLE.len() as u64) as usize]
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        (r + m).clamp(0.0, 1.0),
        (g + m).clamp(0.0, 1.0),
        (b + m).clamp(0.0, 1.0),
    ]
}

pub fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let [h, s, v] = rgb_to_hsv(rgb);
    hsv_to_rgb([h + degrees, s, v])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primaries_rotate_by_thirds() {
        let green = rotate_hue([1.0, 0.0, 0.0], 120.0);
        assert_eq!(green, [0.0, 1.0, 0.0]);
        let blue = rotate_hue([1.0, 0.0, 0.0], 240.0);
        assert_eq!(blue, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn gray_is_a_fixed_point() {
        for d in HUE_SHIFT_TABLE {
            assert_eq!(rotate_hue([0.4, 0.4, 0.4], d), [0.4, 0.4, 0.4]);
        }
    }

    #[test]
    fn round_trip() {
        for rgb in [[0.2, 0.7, 0.9], [0.9, 0.1, 0.5], [0.3, 0.3, 0.8]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for (a, b) in rgb.iter().zip(back) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

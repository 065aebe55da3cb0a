/// Grey level of a residual: 0 maps to 128 and ±0.5 to the ends of the
/// range, clipped.
pub fn residual_pixel(r: f64) -> u8 {
    (128.0 + 256.0 * r).round().clamp(0.0, 255.0) as u8
}

/// Binary portable graymap of a row-major residual field.
pub fn residual_pgm(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&r| residual_pixel(r)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_levels() {
        assert_eq!(residual_pixel(0.0), 128);
        assert_eq!(residual_pixel(0.25), 192);
        assert_eq!(residual_pixel(-0.25), 64);
        assert_eq!(residual_pixel(0.5), 255);
        assert_eq!(residual_pixel(-0.5), 0);
        assert_eq!(residual_pixel(3.0), 255);
        assert_eq!(residual_pixel(f64::NEG_INFINITY), 0);
    }

    #[test]
    fn graymap_layout() {
        let img = residual_pgm(&[0.0, 0.25, -0.5], 1, 3);
        assert_eq!(&img[..11], b"P5\n3 1\n255\n");
        assert_eq!(&img[11..], &[128, 192, 0]);
    }
}

/// Binary greyscale PGM (P5, maxval 255) of a row-major `h×w` field.
/// Values are clamped to [0, 1]; pixels outside `mask` are drawn black.
pub fn encode_pgm(h: usize, w: usize, values: &[f32], mask: &[bool]) -> Vec<u8> {
    assert_eq!(values.len(), h * w, "field size");
    assert_eq!(mask.len(), h * w, "mask size");
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().zip(mask).map(|(&v, &ok)| {
        if ok && v.is_finite() {
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

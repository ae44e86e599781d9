//! Software binary16: encode/decode, rounding, range limits and loss scaling.

use voxseg::halfprec::{decode_fp16, encode_fp16, round_to_fp16, Half, LossScaler};

fn main() {
    for x in [1.0f32, 0.1, 1.0 / 3.0, 65504.0, 65519.0, 65520.0, 6.1035156e-5, 3.0e-8, -2.5] {
        let h = encode_fp16(x);
        println!("{x:>14e} -> {:#06x} -> {:e}", h.to_bits(), decode_fp16(h));
    }
    println!("max finite   {}", decode_fp16(Half::MAX));
    println!("min normal   {:.3e}", decode_fp16(Half::MIN_POSITIVE));
    println!("min subnorm  {:e}", decode_fp16(Half::from_bits(1)));

    let roundtrip = (0..=u16::MAX)
        .map(Half::from_bits)
        .filter(|h| !h.is_nan())
        .all(|h| encode_fp16(decode_fp16(h)) == h);
    println!("all non-NaN patterns round-trip: {roundtrip}");

    // A small gradient underflows in fp16 unless the loss is scaled first.
    let g = 1.0e-8f32;
    let mut scaler = LossScaler::new(65536.0).expect("scale");
    println!("gradient {g:e}: unscaled fp16 {:e}, scaled fp16 {:e}", round_to_fp16(g), round_to_fp16(g * scaler.scale()));
    let decision = scaler.step(false);
    println!("overflow -> {decision:?}, scale now {}", scaler.scale());
}

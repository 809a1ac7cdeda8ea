//! Float formatting shared by every serialization surface: 17 significant
//! digits, enough for `f64` values to round-trip exactly through text.

pub fn g17(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_awkward_values() {
        for x in [
            std::f64::consts::PI,
            1.0 / 3.0,
            -0.1,
            6.02214076e23,
            4.9e-324,
            0.0,
        ] {
            let back: f64 = g17(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} -> {}", g17(x));
        }
    }
}

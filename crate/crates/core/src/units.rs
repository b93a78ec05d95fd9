//! Time units. All simulation timestamps and durations are integer
//! nanoseconds; reports render milliseconds with 3 decimals.

/// A point in simulated time or a duration, in nanoseconds.
pub type Nanos = u64;

pub const NS_PER_US: u64 = 1_000;
pub const NS_PER_MS: u64 = 1_000_000;
pub const NS_PER_S: u64 = 1_000_000_000;

pub fn us(v: f64) -> Nanos {
    (v * NS_PER_US as f64).round() as Nanos
}

pub fn ms(v: f64) -> Nanos {
    (v * NS_PER_MS as f64).round() as Nanos
}

pub fn secs(v: f64) -> Nanos {
    (v * NS_PER_S as f64).round() as Nanos
}

pub fn ns_to_ms(v: Nanos) -> f64 {
    v as f64 / NS_PER_MS as f64
}

pub fn ns_to_us(v: Nanos) -> f64 {
    v as f64 / NS_PER_US as f64
}

/// Milliseconds with 3 decimals, the CSV convention used by all reports.
pub fn fmt_ms(v: Nanos) -> String {
    format!("{:.3}", ns_to_ms(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(ms(120.0), 120 * NS_PER_MS);
        assert_eq!(us(21.7), 21_700);
        assert_eq!(secs(0.45), 450 * NS_PER_MS);
        assert_eq!(fmt_ms(1_234_567), "1.235");
    }
}

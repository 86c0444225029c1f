//! Decibel conversions.

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn lin_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

pub fn to_db(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| lin_to_db(v)).collect()
}

pub fn to_lin(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| db_to_lin(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for db in [-30.0, 0.0, 3.0, 26.5] {
            assert!((lin_to_db(db_to_lin(db)) - db).abs() < 1e-12);
        }
        assert_eq!(db_to_lin(20.0), 100.0);
    }
}

//! Pass/fail records shared by the executable checks.

use serde::{Serialize, Serializer};

/// One check outcome: `discrepancy <= tolerance` unless the check states
/// otherwise (for example a lower bound on a violation).
#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub instance: String,
    #[serde(serialize_with = "ser_f64")]
    pub discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    /// Passes when `discrepancy <= tolerance`.
    pub fn within(name: impl Into<String>, instance: impl Into<String>, discrepancy: f64, tolerance: f64) -> Self {
        CheckReport {
            name: name.into(),
            instance: instance.into(),
            discrepancy,
            tolerance,
            pass: discrepancy <= tolerance,
        }
    }

    /// Passes when `discrepancy > threshold`: the check expects a violation.
    pub fn exceeds(name: impl Into<String>, instance: impl Into<String>, discrepancy: f64, threshold: f64) -> Self {
        CheckReport {
            name: name.into(),
            instance: instance.into(),
            discrepancy,
            tolerance: threshold,
            pass: discrepancy > threshold,
        }
    }
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub fn ser_f64<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

pub fn ser_f64_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    struct F(f64);
    impl Serialize for F {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            ser_f64(&self.0, s)
        }
    }
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for &x in v {
        seq.serialize_element(&F(x))?;
    }
    seq.end()
}

//! Unit-carrying scalar quantities for energy, power, carbon and carbon intensity.
//!
//! Everything is stored in a single canonical unit (joules, watts, grams CO2eq,
//! grams per kWh). kWh and kg only appear when values cross an I/O boundary,
//! and rounding for display happens in [`format_fixed`] and nowhere else.

use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOULES_PER_KWH: f64 = 3_600_000.0;
pub const JOULES_PER_KJ: f64 = 1_000.0;
pub const GRAMS_PER_KG: f64 = 1_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantityError {
    #[error("negative {kind}: {value}")]
    Negative { kind: &'static str, value: f64 },
    #[error("{kind} is not a finite number")]
    NonFinite { kind: &'static str },
}

fn check(kind: &'static str, value: f64) -> Result<f64, QuantityError> {
    if !value.is_finite() {
        return Err(QuantityError::NonFinite { kind });
    }
    if value < 0.0 {
        return Err(QuantityError::Negative { kind, value });
    }
    // normalise -0.0 so serialized output never shows a sign
    Ok(value + 0.0)
}

macro_rules! quantity {
    ($(#[$meta:meta])* $name:ident, $field:ident, $kind:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
        #[serde(try_from = "f64", into = "f64")]
        pub struct $name {
            $field: f64,
        }

        impl $name {
            pub const ZERO: Self = Self { $field: 0.0 };

            pub fn new($field: f64) -> Result<Self, QuantityError> {
                check($kind, $field).map(|$field| Self { $field })
            }
        }

        impl TryFrom<f64> for $name {
            type Error = QuantityError;

            fn try_from(value: f64) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl From<$name> for f64 {
            fn from(q: $name) -> f64 {
                q.$field
            }
        }

        impl Add for $name {
            type Output = Self;

            fn add(self, rhs: Self) -> Self {
                Self { $field: self.$field + rhs.$field }
            }
        }

        impl Sum for $name {
            fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
                iter.fold(Self::ZERO, Add::add)
            }
        }
    };
}

quantity!(
    /// Energy in joules.
    EnergyQuantity, joules, "energy"
);
quantity!(
    /// Power draw in watts.
    PowerQuantity, watts, "power"
);
quantity!(
    /// Mass of CO2-equivalent emissions in grams.
    CarbonQuantity, grams_co2eq, "carbon"
);
quantity!(
    /// Grid carbon intensity in gCO2eq per kWh.
    CarbonIntensityValue, grams_per_kwh, "carbon intensity"
);

impl EnergyQuantity {
    pub fn from_joules(joules: f64) -> Result<Self, QuantityError> {
        Self::new(joules)
    }

    pub fn from_kilojoules(kj: f64) -> Result<Self, QuantityError> {
        check("energy", kj).and_then(|kj| Self::new(kj * JOULES_PER_KJ))
    }

    pub fn from_kwh(kwh: f64) -> Result<Self, QuantityError> {
        kwh_to_joules(kwh)
    }

    /// Exact for any millijoule count below 2^53.
    pub fn from_millijoules(mj: u64) -> Self {
        Self {
            joules: mj as f64 / 1_000.0,
        }
    }

    pub fn joules(&self) -> f64 {
        self.joules
    }

    pub fn kilojoules(&self) -> f64 {
        self.joules / JOULES_PER_KJ
    }

    pub fn kwh(&self) -> f64 {
        joules_to_kwh(*self)
    }

    pub fn scale(&self, factor: f64) -> Result<Self, QuantityError> {
        Self::new(self.joules * factor)
    }
}

impl PowerQuantity {
    pub fn from_watts(watts: f64) -> Result<Self, QuantityError> {
        Self::new(watts)
    }

    pub fn watts(&self) -> f64 {
        self.watts
    }
}

impl CarbonQuantity {
    pub fn from_grams(grams: f64) -> Result<Self, QuantityError> {
        Self::new(grams)
    }

    pub fn from_kg(kg: f64) -> Result<Self, QuantityError> {
        check("carbon", kg).and_then(|kg| Self::new(kg * GRAMS_PER_KG))
    }

    pub fn grams(&self) -> f64 {
        self.grams_co2eq
    }

    pub fn kg(&self) -> f64 {
        self.grams_co2eq / GRAMS_PER_KG
    }
}

impl CarbonIntensityValue {
    pub fn from_g_per_kwh(g: f64) -> Result<Self, QuantityError> {
        Self::new(g)
    }

    pub fn from_kg_per_kwh(kg: f64) -> Result<Self, QuantityError> {
        check("carbon intensity", kg).and_then(|kg| Self::new(kg * GRAMS_PER_KG))
    }

    pub fn g_per_kwh(&self) -> f64 {
        self.grams_per_kwh
    }

    pub fn kg_per_kwh(&self) -> f64 {
        self.grams_per_kwh / GRAMS_PER_KG
    }
}

impl fmt::Display for EnergyQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} J", self.joules)
    }
}

impl fmt::Display for CarbonQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} gCO2eq", self.grams_co2eq)
    }
}

pub fn joules_to_kwh(e: EnergyQuantity) -> f64 {
    e.joules / JOULES_PER_KWH
}

pub fn kwh_to_joules(kwh: f64) -> Result<EnergyQuantity, QuantityError> {
    check("energy", kwh).and_then(|kwh| EnergyQuantity::new(kwh * JOULES_PER_KWH))
}

/// CO2eq = energy (kWh) x intensity (g/kWh).
pub fn carbon_from_energy(e: EnergyQuantity, ci: CarbonIntensityValue) -> CarbonQuantity {
    CarbonQuantity {
        grams_co2eq: joules_to_kwh(e) * ci.grams_per_kwh,
    }
}

pub fn add_carbon(a: CarbonQuantity, b: CarbonQuantity) -> CarbonQuantity {
    a + b
}

/// How a value is cut down to a fixed number of decimals for display.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisplayRounding {
    /// Drop digits past the last shown decimal. This is the convention of the
    /// published summary tables (1.582916 kg shows as 1.582).
    #[default]
    Truncate,
    HalfUp,
}

/// Significant digits kept before any display rounding; absorbs binary
/// representation noise such as 0.194 * 1000 = 193.99999999999997.
const DISPLAY_SIGNIFICANT: usize = 12;

/// Decimal digits and the power of ten of the first digit.
fn decimal_digits(value: f64, significant: usize) -> (Vec<u8>, i32) {
    let repr = format!("{:.*e}", significant - 1, value);
    let (mantissa, exp) = repr.split_once('e').expect("exponent form");
    let digits = mantissa
        .bytes()
        .filter(u8::is_ascii_digit)
        .map(|b| b - b'0')
        .collect();
    (digits, exp.parse().expect("integer exponent"))
}

/// Fixed-point rendering of a non-negative value with `decimals` places.
pub fn format_fixed(value: f64, decimals: usize, mode: DisplayRounding) -> String {
    if value == 0.0 || !value.is_finite() {
        return format!("{:.*}", decimals, 0.0);
    }
    let negative = value < 0.0;
    let (digits, exp) = decimal_digits(value.abs(), DISPLAY_SIGNIFICANT);
    // digit i has weight 10^(exp - i); keep those with weight >= 10^-decimals
    let keep = exp + 1 + decimals as i32;
    let mut kept: Vec<u8> = if keep <= 0 {
        Vec::new()
    } else {
        digits.iter().copied().take(keep as usize).collect()
    };
    while (kept.len() as i32) < keep {
        kept.push(0);
    }
    let mut int_exp = exp;
    if mode == DisplayRounding::HalfUp {
        let next = if keep < 0 {
            0
        } else {
            digits.get(keep as usize).copied().unwrap_or(0)
        };
        if next >= 5 {
            // increment the kept digit string, possibly growing it by one place
            let mut i = kept.len();
            loop {
                if i == 0 {
                    kept.insert(0, 1);
                    int_exp += 1;
                    break;
                }
                i -= 1;
                if kept[i] == 9 {
                    kept[i] = 0;
                } else {
                    kept[i] += 1;
                    break;
                }
            }
        }
    }
    // place the decimal point
    let int_len = int_exp + 1;
    let (int_part, frac_part): (String, String) = if kept.is_empty() {
        ("0".into(), "0".repeat(decimals))
    } else {
        let lead_pad = if int_len < 0 { (-int_len) as usize } else { 0 };
        let mut all: Vec<u8> = std::iter::repeat_n(0, lead_pad).chain(kept).collect();
        let int_len = int_len.max(0) as usize;
        while all.len() < int_len + decimals {
            all.push(0);
        }
        all.truncate(int_len + decimals);
        let to_str = |d: &[u8]| d.iter().map(|d| (b'0' + d) as char).collect::<String>();
        let int = if int_len == 0 {
            "0".to_string()
        } else {
            to_str(&all[..int_len])
        };
        (int, to_str(&all[int_len..]))
    };
    let sign = if negative { "-" } else { "" };
    if decimals == 0 {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac_part}")
    }
}

/// Round to `significant` digits. Used to make serialized reports stable
/// under a parse/render cycle through unit conversions.
pub fn round_significant(value: f64, significant: usize) -> f64 {
    if value == 0.0 || !value.is_finite() {
        return value;
    }
    format!("{:.*e}", significant - 1, value)
        .parse()
        .expect("formatted float parses")
}

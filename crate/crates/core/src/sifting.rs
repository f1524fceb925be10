//! BBM92 sifting and QBER estimation on a disclosed sample.
//!
//! Outcome `+` maps to bit 0 and `-` to bit 1. When the aligned bases are
//! anti-correlated Bob's bits are flipped, so that matched bases yield equal
//! bits in the ideal case.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::model::{Basis, CorrelationSign};
use crate::sim::PairEvent;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiftedKey {
    pub alice_bits: Vec<u8>,
    pub bob_bits: Vec<u8>,
    /// Basis shared by both parties for each bit.
    pub bases: Vec<Basis>,
    /// Coincidences dropped because the bases differed.
    pub mismatched_discarded: u64,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.alice_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice_bits.is_empty()
    }

    /// Bit disagreements per basis `[first, second]`.
    pub fn errors_by_basis(&self) -> [u64; 2] {
        let mut e = [0u64; 2];
        for ((a, b), basis) in self.alice_bits.iter().zip(&self.bob_bits).zip(&self.bases) {
            if a != b {
                e[basis.index()] += 1;
            }
        }
        e
    }

    pub fn counts_by_basis(&self) -> [u64; 2] {
        let mut c = [0u64; 2];
        for basis in &self.bases {
            c[basis.index()] += 1;
        }
        c
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("basis,alice_bit,bob_bit\n");
        for ((a, b), basis) in self.alice_bits.iter().zip(&self.bob_bits).zip(&self.bases) {
            let _ = writeln!(s, "{},{},{}", basis.label(), a, b);
        }
        s
    }

    pub fn to_json(&self) -> String {
        let bits = |v: &[u8]| v.iter().map(|b| if *b == 0 { '0' } else { '1' }).collect::<String>();
        let doc = KeyDoc {
            alice_bits: bits(&self.alice_bits),
            bob_bits: bits(&self.bob_bits),
            bases: self.bases.iter().map(|b| char::from(b'0' + b.label())).collect(),
            mismatched_discarded: self.mismatched_discarded,
        };
        serde_json::to_string_pretty(&doc).expect("plain struct serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: KeyDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        let bits = |s: &str| -> Result<Vec<u8>> {
            s.chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(Error::Parse {
                        line: 0,
                        msg: format!("bad bit `{c}`"),
                    }),
                })
                .collect()
        };
        let key = SiftedKey {
            alice_bits: bits(&doc.alice_bits)?,
            bob_bits: bits(&doc.bob_bits)?,
            bases: doc
                .bases
                .chars()
                .map(|c| {
                    c.to_digit(10)
                        .and_then(|d| Basis::from_label(d as u8))
                        .ok_or_else(|| Error::Parse {
                            line: 0,
                            msg: format!("bad basis `{c}`"),
                        })
                })
                .collect::<Result<_>>()?,
            mismatched_discarded: doc.mismatched_discarded,
        };
        if key.bob_bits.len() != key.len() || key.bases.len() != key.len() {
            return Err(Error::Parse {
                line: 0,
                msg: "key fields differ in length".into(),
            });
        }
        Ok(key)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyDoc {
    alice_bits: String,
    bob_bits: String,
    bases: String,
    mismatched_discarded: u64,
}

/// Keeps matched-basis coincidences as raw key bits.
pub fn sift_events<'a, I>(events: I, sign: CorrelationSign) -> SiftedKey
where
    I: IntoIterator<Item = &'a PairEvent>,
{
    let flip = u8::from(sign == CorrelationSign::Minus);
    let mut key = SiftedKey::default();
    for e in events {
        if e.alice_basis != e.bob_basis {
            key.mismatched_discarded += 1;
            continue;
        }
        key.alice_bits.push(e.alice_outcome.bit());
        key.bob_bits.push(e.bob_outcome.bit() ^ flip);
        key.bases.push(e.alice_basis);
    }
    key
}

/// Outcome of comparing a publicly disclosed sample of the key.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QberReport {
    pub disclosed_count: u64,
    pub disclosed_11: u64,
    pub disclosed_22: u64,
    pub errors_11: u64,
    pub errors_22: u64,
    pub qber_11: Option<f64>,
    pub qber_22: Option<f64>,
    pub key_bits_remaining: u64,
    /// Set when a basis had no disclosed bits, so its QBER is unknown.
    pub no_estimate: bool,
}

impl QberReport {
    pub fn from_counts(disclosed: [u64; 2], errors: [u64; 2], key_bits_remaining: u64) -> Self {
        let rate = |e: u64, n: u64| (n > 0).then(|| e as f64 / n as f64);
        QberReport {
            disclosed_count: disclosed[0] + disclosed[1],
            disclosed_11: disclosed[0],
            disclosed_22: disclosed[1],
            errors_11: errors[0],
            errors_22: errors[1],
            qber_11: rate(errors[0], disclosed[0]),
            qber_22: rate(errors[1], disclosed[1]),
            key_bits_remaining,
            no_estimate: disclosed[0] == 0 || disclosed[1] == 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// Discloses `floor(f * len)` uniformly chosen bits, estimates the QBER of
/// each basis from them and removes them from the key.
pub fn disclose_fraction<R: Rng + ?Sized>(key: &SiftedKey, f: f64, rng: &mut R) -> Result<(QberReport, SiftedKey)> {
    let f = check_range("disclosed fraction", f, 0.0, 1.0)?;
    let len = key.len();
    let picked = disclosure_mask(len, f, rng);
    let mut disclosed = [0u64; 2];
    let mut errors = [0u64; 2];
    let mut rest = SiftedKey {
        mismatched_discarded: key.mismatched_discarded,
        ..SiftedKey::default()
    };
    for (i, &is_picked) in picked.iter().enumerate() {
        let (a, b, basis) = (key.alice_bits[i], key.bob_bits[i], key.bases[i]);
        if is_picked {
            disclosed[basis.index()] += 1;
            errors[basis.index()] += u64::from(a != b);
        } else {
            rest.alice_bits.push(a);
            rest.bob_bits.push(b);
            rest.bases.push(basis);
        }
    }
    Ok((QberReport::from_counts(disclosed, errors, rest.len() as u64), rest))
}

pub(crate) fn disclosure_mask<R: Rng + ?Sized>(len: usize, f: f64, rng: &mut R) -> Vec<bool> {
    let k = ((f * len as f64).floor() as usize).min(len);
    let mut picked = vec![false; len];
    for i in rand::seq::index::sample(rng, len, k) {
        picked[i] = true;
    }
    picked
}

/// Count-weighted pooling of reports from disjoint windows.
pub fn qber_report_merge<'a, I>(reports: I) -> QberReport
where
    I: IntoIterator<Item = &'a QberReport>,
{
    let mut disclosed = [0u64; 2];
    let mut errors = [0u64; 2];
    let mut remaining = 0;
    for r in reports {
        disclosed[0] += r.disclosed_11;
        disclosed[1] += r.disclosed_22;
        errors[0] += r.errors_11;
        errors[1] += r.errors_22;
        remaining += r.key_bits_remaining;
    }
    QberReport::from_counts(disclosed, errors, remaining)
}

use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predicted emotions equal to the gold label.
pub fn emotion_accuracy(predicted: &[String], gold: &[String]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            actual: predicted.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Empty("emotion accuracy corpus".into()));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// One response's empathy-mechanism levels: interpretations, explorations,
/// emotional reactions, each in {0, 1, 2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpitomeRating {
    pub ip: u8,
    pub ex: u8,
    pub er: u8,
}

impl EpitomeRating {
    pub fn from_raw(sample_id: &str, ip: i64, ex: i64, er: i64) -> Result<Self> {
        let check = |mechanism: &str, v: i64| {
            if (0..=2).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::InvalidRating {
                    mechanism: mechanism.to_string(),
                    sample_id: sample_id.to_string(),
                    value: v,
                })
            }
        };
        Ok(Self {
            ip: check("IP", ip)?,
            ex: check("EX", ex)?,
            er: check("ER", er)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpitomeMeans {
    pub ip: f64,
    pub ex: f64,
    pub er: f64,
}

pub fn epitome_means(ratings: &[EpitomeRating]) -> Result<EpitomeMeans> {
    if ratings.is_empty() {
        return Err(Error::Empty("EPITOME ratings".into()));
    }
    let n = ratings.len() as f64;
    let mean = |f: fn(&EpitomeRating) -> u8| ratings.iter().map(|r| f64::from(f(r))).sum::<f64>() / n;
    Ok(EpitomeMeans {
        ip: mean(|r| r.ip),
        ex: mean(|r| r.ex),
        er: mean(|r| r.er),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn accuracy_counts() {
        let gold: Vec<String> = (0..20).map(|i| if i % 2 == 0 { "sad".into() } else { "joyful".into() }).collect();
        let mut pred = gold.clone();
        assert_eq!(emotion_accuracy(&pred, &gold).unwrap(), 1.0);
        for (i, p) in pred.iter_mut().enumerate() {
            if i >= 5 {
                *p = "afraid".into();
            }
        }
        assert_eq!(emotion_accuracy(&pred, &gold).unwrap(), 0.25);
        let wrong: Vec<String> = gold.iter().map(|_| "afraid".to_string()).collect();
        assert_eq!(emotion_accuracy(&wrong, &gold).unwrap(), 0.0);
        assert!(emotion_accuracy(&pred[..3], &gold).is_err());
    }

    #[test]
    fn epitome_validation_and_means() {
        assert!(EpitomeRating::from_raw("s1", 0, 3, 1).is_err());
        assert!(EpitomeRating::from_raw("s1", -1, 0, 1).is_err());
        let all2 = [EpitomeRating::from_raw("a", 2, 2, 2).unwrap(); 4];
        assert_eq!(epitome_means(&all2).unwrap(), EpitomeMeans { ip: 2.0, ex: 2.0, er: 2.0 });
        let mixed = [
            EpitomeRating::from_raw("a", 0, 1, 2).unwrap(),
            EpitomeRating::from_raw("b", 1, 2, 0).unwrap(),
        ];
        assert_eq!(epitome_means(&mixed).unwrap(), EpitomeMeans { ip: 0.5, ex: 1.5, er: 1.0 });
    }
}

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Splits city names into (train, eval). The city keys are sorted before a
/// seeded shuffle, so the result ignores input order. The eval side receives
/// `round(fraction * n)` cities, clamped to `1 ..= n-1`.
pub fn split_by_city<'a>(
    cities: impl IntoIterator<Item = &'a str>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Split(format!("fraction {fraction} outside [0, 1]")));
    }
    let set: BTreeSet<&str> = cities.into_iter().collect();
    let mut names: Vec<String> = set.into_iter().map(str::to_string).collect();
    if names.len() < 2 {
        return Err(Error::Split(format!("need at least 2 cities, found {}", names.len())));
    }
    let n = names.len();
    let n_eval = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut eval = names.split_off(n - n_eval);
    names.sort();
    eval.sort();
    Ok((names, eval))
}

/// Station ids on each side of a city split.
pub fn stations_by_split(
    cities: &BTreeMap<String, Vec<String>>,
    fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let (train, eval) = split_by_city(cities.keys().map(String::as_str), fraction, seed)?;
    let collect = |names: &[String]| names.iter().flat_map(|c| cities[c].iter().cloned()).collect();
    Ok((collect(&train), collect(&eval)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cities(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("city{i:02}")).collect()
    }

    #[test]
    fn ten_cities_split_eight_two() {
        let c = cities(10);
        let (tr, ev) = split_by_city(c.iter().map(String::as_str), 0.2, 7).unwrap();
        assert_eq!((tr.len(), ev.len()), (8, 2));
        assert!(tr.iter().all(|x| !ev.contains(x)));
        let again = split_by_city(c.iter().map(String::as_str), 0.2, 7).unwrap();
        assert_eq!((tr.clone(), ev.clone()), again);
        let mut rev = c.clone();
        rev.reverse();
        assert_eq!(split_by_city(rev.iter().map(String::as_str), 0.2, 7).unwrap(), (tr, ev));
    }

    #[test]
    fn single_city_is_an_error() {
        assert!(matches!(split_by_city(["only"], 0.2, 1), Err(Error::Split(_))));
    }
}

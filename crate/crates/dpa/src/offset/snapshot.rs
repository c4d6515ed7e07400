//! Line-based model snapshot format.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! parsed snapshot reproduces the exact bit pattern of every parameter.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::offset::model::{Hyperparams, ModelState, WeightEntry};
use crate::offset::schema::FeatureSchema;

pub const SNAPSHOT_HEADER: &str = "#offset-model\tv1";

fn join_floats(xs: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s
}

fn parse_floats(s: &str, path: &str, line: usize) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_string(),
                line,
                msg: format!("bad float {t:?}"),
            })
        })
        .collect()
}

pub fn write_model(model: &ModelState, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{SNAPSHOT_HEADER}")?;
    let schema = model.schema();
    writeln!(out, "user-features\t{}", schema.user_features().join(","))?;
    writeln!(out, "ad-features\t{}", schema.ad_features().join(","))?;
    writeln!(out, "sim-features\t{}", schema.sim_features().join(","))?;
    writeln!(out, "dims\t{}\t{}", schema.pair_width(), schema.solo_width())?;
    let h = model.hyper();
    writeln!(out, "hyper\t{}\t{}\t{}", h.eta0, h.lambda, h.init_variance)?;
    writeln!(out, "seed\t{}", model.seed())?;
    writeln!(out, "bias\t{}\t{}", model.bias, model.bias_acc)?;
    for ((feature, value), entry) in model.user_table.iter() {
        writeln!(
            out,
            "u\t{feature}\t{value}\t{}\t{}",
            join_floats(&entry.vec),
            join_floats(&entry.acc)
        )?;
    }
    for ((feature, value), entry) in model.ad_table.iter() {
        writeln!(
            out,
            "a\t{feature}\t{value}\t{}\t{}",
            join_floats(&entry.vec),
            join_floats(&entry.acc)
        )?;
    }
    for ((feature, bin), entry) in &model.sim_weights {
        writeln!(out, "w\t{feature}\t{bin}\t{}\t{}", entry.w, entry.acc)?;
    }
    Ok(())
}

pub fn read_model(lines: &mut impl Iterator<Item = std::io::Result<String>>, path: &str) -> Result<ModelState> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lineno = 0usize;
    let mut next = || -> Result<Option<String>> {
        lineno += 1;
        match lines.next() {
            Some(l) => Ok(Some(l?)),
            None => Ok(None),
        }
    };

    let header = next()?.ok_or_else(|| perr(1, "empty snapshot".into()))?;
    if header != SNAPSHOT_HEADER {
        return Err(perr(1, format!("unexpected header {header:?}")));
    }

    let mut user_features = None;
    let mut ad_features = None;
    let mut sim_features = None;
    let mut dims = None;
    let mut hyper = None;
    let mut seed = None;
    let mut bias = None;
    let mut user_entries: Vec<(String, String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut ad_entries: Vec<(String, String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut weights: Vec<(String, String, f64, f64)> = Vec::new();

    let mut n = 1usize;
    while let Some(line) = next()? {
        n += 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let split_names = |s: &str| -> Vec<String> {
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(',').map(str::to_string).collect()
            }
        };
        match fields[0] {
            "user-features" => user_features = Some(split_names(fields.get(1).copied().unwrap_or(""))),
            "ad-features" => ad_features = Some(split_names(fields.get(1).copied().unwrap_or(""))),
            "sim-features" => sim_features = Some(split_names(fields.get(1).copied().unwrap_or(""))),
            "dims" => {
                if fields.len() != 3 {
                    return Err(perr(n, "dims needs 2 fields".into()));
                }
                let o = fields[1].parse().map_err(|_| perr(n, "bad pair width".into()))?;
                let s = fields[2].parse().map_err(|_| perr(n, "bad solo width".into()))?;
                dims = Some((o, s));
            }
            "hyper" => {
                if fields.len() != 4 {
                    return Err(perr(n, "hyper needs 3 fields".into()));
                }
                hyper = Some(Hyperparams {
                    eta0: fields[1].parse().map_err(|_| perr(n, "bad eta0".into()))?,
                    lambda: fields[2].parse().map_err(|_| perr(n, "bad lambda".into()))?,
                    init_variance: fields[3]
                        .parse()
                        .map_err(|_| perr(n, "bad init variance".into()))?,
                });
            }
            "seed" => seed = Some(fields[1].parse().map_err(|_| perr(n, "bad seed".into()))?),
            "bias" => {
                if fields.len() != 3 {
                    return Err(perr(n, "bias needs 2 fields".into()));
                }
                bias = Some((
                    fields[1].parse::<f64>().map_err(|_| perr(n, "bad bias".into()))?,
                    fields[2].parse::<f64>().map_err(|_| perr(n, "bad bias acc".into()))?,
                ));
            }
            "u" | "a" => {
                if fields.len() != 5 {
                    return Err(perr(n, "vector line needs 4 fields".into()));
                }
                let rec = (
                    fields[1].to_string(),
                    fields[2].to_string(),
                    parse_floats(fields[3], path, n)?,
                    parse_floats(fields[4], path, n)?,
                );
                if fields[0] == "u" {
                    user_entries.push(rec);
                } else {
                    ad_entries.push(rec);
                }
            }
            "w" => {
                if fields.len() != 5 {
                    return Err(perr(n, "weight line needs 4 fields".into()));
                }
                weights.push((
                    fields[1].to_string(),
                    fields[2].to_string(),
                    fields[3].parse().map_err(|_| perr(n, "bad weight".into()))?,
                    fields[4].parse().map_err(|_| perr(n, "bad weight acc".into()))?,
                ));
            }
            other => return Err(perr(n, format!("unknown record {other:?}"))),
        }
    }

    let user_features = user_features.ok_or_else(|| perr(n, "missing user-features".into()))?;
    let ad_features = ad_features.ok_or_else(|| perr(n, "missing ad-features".into()))?;
    let sim_features = sim_features.ok_or_else(|| perr(n, "missing sim-features".into()))?;
    let (o, s) = dims.ok_or_else(|| perr(n, "missing dims".into()))?;
    let hyper = hyper.ok_or_else(|| perr(n, "missing hyper".into()))?;
    let seed = seed.ok_or_else(|| perr(n, "missing seed".into()))?;
    let (bias, bias_acc) = bias.ok_or_else(|| perr(n, "missing bias".into()))?;

    let schema = FeatureSchema::new(user_features, o, s, ad_features, sim_features)?;
    let mut model = ModelState::new(schema, hyper, seed);
    model.bias = bias;
    model.bias_acc = bias_acc;
    let d = model.schema().user_dim();
    let joint = model.schema().joint_dim();
    for (feature, value, vec, acc) in user_entries {
        if vec.len() != d || acc.len() != d {
            return Err(perr(n, format!("user vector for {feature}/{value} has wrong dimension")));
        }
        model.user_table.insert(&feature, &value, vec, acc);
    }
    for (feature, value, vec, acc) in ad_entries {
        if vec.len() != joint || acc.len() != joint {
            return Err(perr(n, format!("ad vector for {feature}/{value} has wrong dimension")));
        }
        model.ad_table.insert(&feature, &value, vec, acc);
    }
    for (feature, bin, w, acc) in weights {
        model.sim_weights.insert((feature, bin), WeightEntry { w, acc });
    }
    Ok(model)
}

pub fn save_model(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(model, &mut out)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut file.lines(), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offset::event::{Event, EventKind};
    use crate::offset::schema::FeatureSchema;

    fn toy_schema() -> FeatureSchema {
        FeatureSchema::new(
            vec!["age".into(), "gender".into()],
            2,
            1,
            vec!["advertiser-id".into(), "product-id".into()],
            vec!["recency".into()],
        )
        .unwrap()
    }

    fn toy_event(i: u64) -> Event {
        Event::new(EventKind::Click, (i % 2) as u8, i as i64)
            .with_user_value("age", &format!("a{}", i % 5))
            .with_user("gender", vec![("f".into(), 1.0), (format!("g{}", i % 3), 0.5)])
            .with_ad("advertiser-id", &format!("adv{}", i % 4))
            .with_ad("product-id", &format!("p{}", i % 7))
            .with_sim("recency", if i % 2 == 0 { "<1d" } else { ">7d" })
    }

    #[test]
    fn round_trip_preserves_predictions_bit_exactly() {
        let mut model = ModelState::with_defaults(toy_schema(), 42);
        let events: Vec<Event> = (0..300).map(toy_event).collect();
        model.train_batch(&events).unwrap();

        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let restored = read_model(
            &mut std::io::BufRead::lines(std::io::Cursor::new(buf)),
            "mem",
        )
        .unwrap();

        assert_eq!(model, restored);
        for i in 1000..2000 {
            let ev = toy_event(i);
            let a = model.predict(&ev).unwrap();
            let b = restored.predict(&ev).unwrap();
            assert!(a.to_bits() == b.to_bits(), "prediction differs on event {i}");
        }
    }

    #[test]
    fn rejects_bad_header() {
        let text = "not a snapshot\n";
        let err = read_model(
            &mut std::io::BufRead::lines(std::io::Cursor::new(text.as_bytes().to_vec())),
            "mem",
        );
        assert!(err.is_err());
    }
}

//! Published reference tables shipped as pinned CSV fixtures.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FIXTURE_VERSION: &str = "v1";

/// One embedded table.
#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub id: &'static str,
    pub description: &'static str,
    pub csv: &'static str,
    pub sha256: &'static str,
}

macro_rules! fixture {
    ($id:literal, $desc:literal, $sha:literal) => {
        Fixture {
            id: $id,
            description: $desc,
            csv: include_str!(concat!("../fixtures/v1/", $id, ".csv")),
            sha256: $sha,
        }
    };
}

pub const FIXTURES: [Fixture; 10] = [
    fixture!(
        "table1",
        "high vs medium-to-low resource activation difference (%) per layer",
        "ab3ecd9fb7d2b36d5b537ff8144c57399c6b0d749fe887fd503113bd3ef16253"
    ),
    fixture!(
        "table3",
        "ARC-Challenge accuracy (%) per language",
        "35803d57b6e25103970f6e53075735e0a3769dbab9fd8b3a1e342e85a2016094"
    ),
    fixture!(
        "table4",
        "HellaSwag accuracy (%) per language",
        "1adf79deba44c22676ddf2fa1da7226c1cc41ecd4e3ae9a6f3e92e3fc6438c13"
    ),
    fixture!(
        "table5",
        "MMLU accuracy (%) per language",
        "d441659bd03b45bcab866f0a65f1a96facbc1146aaa3312bf105d45071204215"
    ),
    fixture!(
        "table6",
        "activation improvement (%) after alignment tuning at layer 20",
        "05d4d36cd36c600ca6b61be6665ea956ee4dd11a36b8f5310bdbd854ed759135"
    ),
    fixture!(
        "table7",
        "English activation retention (%) after alignment tuning, per paired language",
        "bfef79fad2f3af350302209f007167133475a4f32d6e810f669aa07eba6e6395"
    ),
    fixture!(
        "table8",
        "mean and standard deviation of activation ratios to English",
        "c65d3e9c19d369fd8d8f7f59c6da90a6efbd8a1326a3fad5166f275b62933456"
    ),
    fixture!(
        "table9",
        "Malayalam activation improvement (%) per tuned layer",
        "92182d9b5599268e3ddc10fc03cf2b925f22d54777b830a55c86e244737d3e37"
    ),
    fixture!(
        "table10",
        "English activation retention (%) per tuned layer",
        "1e914525ce15dcba0251cbf6018318d261a0e5cb06b3e3859734eeebd3f40db7"
    ),
    fixture!(
        "table11",
        "Malayalam benchmark accuracy (%) before and after tuning",
        "d91671d8e37774938bf718feb5acdd172d251effb490abae4c16a538525288c2"
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkScore {
    pub benchmark: String,
    pub score_type: String,
    pub accuracy: f64,
}

/// Typed rows of a fixture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FixtureRows {
    /// layer → value
    PerLayer(BTreeMap<u32, f64>),
    /// language code → value
    PerLanguage(BTreeMap<String, f64>),
    /// language code → (mean, std)
    RatioStats(BTreeMap<String, (f64, f64)>),
    Benchmarks(Vec<BenchmarkScore>),
}

impl FixtureRows {
    pub fn per_layer(&self) -> Option<&BTreeMap<u32, f64>> {
        match self {
            Self::PerLayer(m) => Some(m),
            _ => None,
        }
    }

    pub fn per_language(&self) -> Option<&BTreeMap<String, f64>> {
        match self {
            Self::PerLanguage(m) => Some(m),
            _ => None,
        }
    }

    pub fn ratio_stats(&self) -> Option<&BTreeMap<String, (f64, f64)>> {
        match self {
            Self::RatioStats(m) => Some(m),
            _ => None,
        }
    }

    pub fn benchmarks(&self) -> Option<&[BenchmarkScore]> {
        match self {
            Self::Benchmarks(v) => Some(v),
            _ => None,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn fixture(id: &str) -> Result<&'static Fixture> {
    FIXTURES
        .iter()
        .find(|f| f.id == id)
        .ok_or_else(|| Error::invalid(format!("unknown fixture '{id}'")))
}

/// Validated, typed rows of an embedded fixture.
pub fn load_fixture(id: &str) -> Result<FixtureRows> {
    let f = fixture(id)?;
    parse_fixture(f, f.csv)
}

/// Like [`load_fixture`] but reads `<dir>/<id>.csv`, which must match the pinned checksum.
pub fn load_fixture_from(dir: &Path, id: &str) -> Result<FixtureRows> {
    let f = fixture(id)?;
    let path = dir.join(format!("{id}.csv"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_fixture(f, &text)
}

/// Writes every embedded fixture to `dir`.
pub fn export_fixtures(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    FIXTURES
        .iter()
        .map(|f| {
            let p = dir.join(format!("{}.csv", f.id));
            std::fs::write(&p, f.csv).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect()
}

fn parse_fixture(f: &Fixture, text: &str) -> Result<FixtureRows> {
    let actual = sha256_hex(text.as_bytes());
    if actual != f.sha256 {
        return Err(Error::invalid(format!(
            "fixture '{}' checksum mismatch: expected {}, found {actual}",
            f.id, f.sha256
        )));
    }
    let path = Path::new(f.id);
    match f.id {
        "table1" | "table9" | "table10" => per_layer(text, path).map(FixtureRows::PerLayer),
        "table3" | "table4" | "table5" => {
            crate::eval::parse_accuracy_csv(text, path).map(FixtureRows::PerLanguage)
        }
        "table6" => per_language(text, path, "improvement_percent").map(FixtureRows::PerLanguage),
        "table7" => per_language(text, path, "retention_percent").map(FixtureRows::PerLanguage),
        "table8" => ratio_stats(text, path).map(FixtureRows::RatioStats),
        "table11" => benchmarks(text, path).map(FixtureRows::Benchmarks),
        other => Err(Error::invalid(format!("no schema for fixture '{other}'"))),
    }
}

fn rows(text: &str) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((headers, rows))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("missing column '{name}'"),
    })
}

fn number(row: &csv::StringRecord, col: usize, line: usize, path: &Path) -> Result<f64> {
    let cell = row.get(col).unwrap_or("");
    cell.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("not a number: '{cell}'"),
    })
}

fn per_layer(text: &str, path: &Path) -> Result<BTreeMap<u32, f64>> {
    let (h, rows) = rows(text)?;
    let value_col = 1;
    let layer_col = column(&h, "layer", path)?;
    let mut out = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let layer = number(row, layer_col, i + 2, path)? as u32;
        out.insert(layer, number(row, value_col, i + 2, path)?);
    }
    Ok(out)
}

/// `language` column plus one numeric column.
pub fn per_language(text: &str, path: &Path, value: &str) -> Result<BTreeMap<String, f64>> {
    let (h, rows) = rows(text)?;
    let (lc, vc) = (column(&h, "language", path)?, column(&h, value, path)?);
    let mut out = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let lang = row.get(lc).unwrap_or("").trim().to_string();
        if out.insert(lang.clone(), number(row, vc, i + 2, path)?).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: format!("duplicate language '{lang}'"),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no rows".into(),
        });
    }
    Ok(out)
}

fn ratio_stats(text: &str, path: &Path) -> Result<BTreeMap<String, (f64, f64)>> {
    let means = per_language(text, path, "mean_ratio")?;
    let stds = per_language(text, path, "std_ratio")?;
    Ok(means.into_iter().map(|(l, m)| (l.clone(), (m, stds[&l]))).collect())
}

fn benchmarks(text: &str, path: &Path) -> Result<Vec<BenchmarkScore>> {
    let (h, rows) = rows(text)?;
    let (bc, sc, ac) = (
        column(&h, "benchmark", path)?,
        column(&h, "score_type", path)?,
        column(&h, "accuracy", path)?,
    );
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            Ok(BenchmarkScore {
                benchmark: row.get(bc).unwrap_or("").to_string(),
                score_type: row.get(sc).unwrap_or("").to_string(),
                accuracy: number(row, ac, i + 2, path)?,
            })
        })
        .collect()
}

/// Mean activation ratios from a CSV with `language` and `mean_ratio` columns.
pub fn load_ratio_csv(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    per_language(&text, path, "mean_ratio")
}

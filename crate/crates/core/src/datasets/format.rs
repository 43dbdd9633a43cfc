//! On-disk formats.
//!
//! Feature file (little-endian):
//!
//! ```text
//! magic "FDRLFEAT" | version u32 | d_in u32 | C u32 | count u64
//! count × { h_a: d_in × f64 | h_t: d_in × f64 | label u32 }
//! ```
//!
//! A CSV alternative is accepted for small fixtures: a header naming `label`,
//! optionally `fold`, then `a0..a{d-1}` and `t0..t{d-1}`.
//!
//! The manifest is a `key = value` text file next to the features
//! (`<stem>.manifest`); synthetic ground truth goes to `<stem>.truth`:
//!
//! ```text
//! magic "FDRLTRUE" | version u32 | shared u32 | private_a u32 | private_t u32 | count u64
//! count × { z_s | z_a | z_t } as f64
//! ```

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{assign_folds, default_class_names, DataError, Dataset, DatasetManifest, FeatureRecord, LatentTruth};

pub const FEATURE_MAGIC: &[u8; 8] = b"FDRLFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const TRUTH_MAGIC: &[u8; 8] = b"FDRLTRUE";
const DEFAULT_FOLDS: usize = 5;

pub fn manifest_path(features: &Path) -> PathBuf {
    features.with_extension("manifest")
}

pub fn truth_path(features: &Path) -> PathBuf {
    features.with_extension("truth")
}

pub fn write_features(w: impl Write, d_in: usize, classes: usize, records: &[FeatureRecord]) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(d_in as u32).to_le_bytes())?;
    w.write_all(&(classes as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        for v in r.h_a.iter().chain(&r.h_t) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(r.y_e as u32).to_le_bytes())?;
    }
    w.flush()
}

/// Header fields of a binary feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub d_in: usize,
    pub classes: usize,
    pub count: usize,
}

fn header_err(what: &str) -> impl Fn(io::Error) -> DataError + '_ {
    move |e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DataError::Header(format!("truncated header ({what})")),
        _ => DataError::Io(e),
    }
}

/// Reads and validates a binary feature stream.
pub fn read_features(mut r: impl Read) -> Result<(FeatureHeader, Vec<FeatureRecord>), DataError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(header_err("magic"))?;
    if &magic != FEATURE_MAGIC {
        return Err(DataError::Header("bad magic, not an FDRLFEAT file".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(header_err("version"))?;
    let version = u32::from_le_bytes(u32b);
    if version != FEATURE_VERSION {
        return Err(DataError::Version(version));
    }
    r.read_exact(&mut u32b).map_err(header_err("d_in"))?;
    let d_in = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u32b).map_err(header_err("classes"))?;
    let classes = u32::from_le_bytes(u32b) as usize;
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(header_err("count"))?;
    let count = u64::from_le_bytes(u64b) as usize;
    if d_in == 0 || classes == 0 {
        return Err(DataError::Header(format!("degenerate header d_in={d_in} classes={classes}")));
    }

    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; 2 * d_in * 8 + 4];
    for record in 0..count {
        r.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DataError::Truncated { record },
            _ => DataError::Io(e),
        })?;
        let vals: Vec<f64> = buf[..2 * d_in * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let y_e = u32::from_le_bytes(buf[2 * d_in * 8..].try_into().expect("4 bytes")) as usize;
        let rec = FeatureRecord {
            h_a: vals[..d_in].to_vec(),
            h_t: vals[d_in..].to_vec(),
            y_e,
        };
        rec.validate(record, d_in, classes)?;
        records.push(rec);
    }
    Ok((FeatureHeader { d_in, classes, count }, records))
}

pub fn write_manifest(w: impl Write, m: &DatasetManifest) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "# FDRL dataset manifest")?;
    writeln!(w, "format = FDRLFEAT")?;
    writeln!(w, "version = {FEATURE_VERSION}")?;
    writeln!(w, "d_in = {}", m.d_in)?;
    writeln!(w, "classes = {}", m.classes)?;
    writeln!(w, "class_names = {}", m.class_names.join(","))?;
    writeln!(w, "count = {}", m.count)?;
    writeln!(w, "folds = {}", m.folds)?;
    let folds: Vec<String> = m.fold_of.iter().map(usize::to_string).collect();
    writeln!(w, "fold_assignment = {}", folds.join(","))?;
    writeln!(w, "provenance = {}", m.provenance)?;
    w.flush()
}

pub fn load_manifest(text: &str) -> Result<DatasetManifest, DataError> {
    let mut d_in = None;
    let mut classes = None;
    let mut class_names = None;
    let mut count = None;
    let mut folds = None;
    let mut fold_of = None;
    let mut provenance = String::new();
    let num = |k: &str, v: &str| -> Result<usize, DataError> {
        v.parse()
            .map_err(|_| DataError::Manifest(format!("{k}: '{v}' is not a count")))
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Manifest(format!("line {}: expected key = value", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "format" if v != "FDRLFEAT" => {
                return Err(DataError::Manifest(format!("unknown format '{v}'")));
            }
            "version" if v != FEATURE_VERSION.to_string() => {
                return Err(DataError::Manifest(format!("unsupported version '{v}'")));
            }
            "format" | "version" => {}
            "d_in" => d_in = Some(num(k, v)?),
            "classes" => classes = Some(num(k, v)?),
            "class_names" => {
                class_names = Some(v.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>())
            }
            "count" => count = Some(num(k, v)?),
            "folds" => folds = Some(num(k, v)?),
            "fold_assignment" => {
                fold_of = Some(if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| num(k, s.trim())).collect::<Result<Vec<_>, _>>()?
                })
            }
            "provenance" => provenance = v.to_string(),
            other => return Err(DataError::Manifest(format!("unknown key '{other}'"))),
        }
    }
    let missing = |k: &str| DataError::Manifest(format!("missing key '{k}'"));
    let classes = classes.ok_or_else(|| missing("classes"))?;
    let m = DatasetManifest {
        d_in: d_in.ok_or_else(|| missing("d_in"))?,
        classes,
        class_names: class_names.unwrap_or_else(|| default_class_names(classes)),
        count: count.ok_or_else(|| missing("count"))?,
        folds: folds.ok_or_else(|| missing("folds"))?,
        fold_of: fold_of.ok_or_else(|| missing("fold_assignment"))?,
        provenance,
    };
    m.validate()?;
    Ok(m)
}

pub fn write_truth(w: impl Write, truth: &[LatentTruth]) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    let dims = truth
        .first()
        .map_or((0, 0, 0), |t| (t.z_s.len(), t.z_a.len(), t.z_t.len()));
    w.write_all(TRUTH_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    for d in [dims.0, dims.1, dims.2] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(truth.len() as u64).to_le_bytes())?;
    for t in truth {
        for v in t.z_s.iter().chain(&t.z_a).chain(&t.z_t) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn load_truth(mut r: impl Read) -> Result<Vec<LatentTruth>, DataError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(header_err("truth magic"))?;
    if &magic != TRUTH_MAGIC {
        return Err(DataError::Header("bad ground-truth magic".into()));
    }
    let mut u32b = [0u8; 4];
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        r.read_exact(&mut u32b).map_err(header_err("truth dims"))?;
        *d = u32::from_le_bytes(u32b) as usize;
    }
    if dims[0] != FEATURE_VERSION as usize {
        return Err(DataError::Version(dims[0] as u32));
    }
    let (ds, da, dt) = (dims[1], dims[2], dims[3]);
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(header_err("truth count"))?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    let mut buf = vec![0u8; (ds + da + dt) * 8];
    for record in 0..count {
        r.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DataError::Truncated { record },
            _ => DataError::Io(e),
        })?;
        let v: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push(LatentTruth {
            z_s: v[..ds].to_vec(),
            z_a: v[ds..ds + da].to_vec(),
            z_t: v[ds + da..].to_vec(),
        });
    }
    Ok(out)
}

pub fn write_features_csv(w: impl Write, dataset: &Dataset) -> Result<(), DataError> {
    let mut wr = csv::Writer::from_writer(w);
    let d = dataset.d_in();
    let mut header = vec!["label".to_string(), "fold".to_string()];
    header.extend((0..d).map(|i| format!("a{i}")));
    header.extend((0..d).map(|i| format!("t{i}")));
    wr.write_record(&header).map_err(|e| DataError::Csv(e.to_string()))?;
    for (i, r) in dataset.records.iter().enumerate() {
        let mut row = vec![r.y_e.to_string(), dataset.manifest.fold_of[i].to_string()];
        row.extend(r.h_a.iter().chain(&r.h_t).map(|v| v.to_string()));
        wr.write_record(&row).map_err(|e| DataError::Csv(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// `d_in`, records, and the fold column if present.
type CsvFeatures = (usize, Vec<FeatureRecord>, Option<Vec<usize>>);

/// Parses the CSV alternative.
fn read_features_csv(text: &[u8]) -> Result<CsvFeatures, DataError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text);
    let header = rd.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let label_col = col("label").ok_or_else(|| DataError::Csv("header lacks a 'label' column".into()))?;
    let fold_col = col("fold");
    let a_cols: Vec<usize> = (0..).map_while(|i| col(&format!("a{i}"))).collect();
    let t_cols: Vec<usize> = (0..).map_while(|i| col(&format!("t{i}"))).collect();
    if a_cols.is_empty() || a_cols.len() != t_cols.len() {
        return Err(DataError::Csv(format!(
            "header has {} speech and {} text columns",
            a_cols.len(),
            t_cols.len()
        )));
    }
    let d_in = a_cols.len();
    let mut records = Vec::new();
    let mut folds = fold_col.map(|_| Vec::new());
    for (record, row) in rd.records().enumerate() {
        let row = row.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, .. } => DataError::Dimension {
                record,
                expected: header.len(),
                found: *len as usize,
            },
            _ => DataError::Csv(e.to_string()),
        })?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let parse = |c: usize| -> Result<f64, DataError> {
            field(c)
                .parse::<f64>()
                .map_err(|_| DataError::Csv(format!("record {record}: '{}' is not a number", field(c))))
        };
        let y_e = field(label_col)
            .parse::<usize>()
            .map_err(|_| DataError::Csv(format!("record {record}: bad label '{}'", field(label_col))))?;
        if let (Some(fc), Some(f)) = (fold_col, folds.as_mut()) {
            f.push(
                field(fc)
                    .parse::<usize>()
                    .map_err(|_| DataError::Csv(format!("record {record}: bad fold '{}'", field(fc))))?,
            );
        }
        records.push(FeatureRecord {
            h_a: a_cols.iter().map(|&c| parse(c)).collect::<Result<_, _>>()?,
            h_t: t_cols.iter().map(|&c| parse(c)).collect::<Result<_, _>>()?,
            y_e,
        });
    }
    Ok((d_in, records, folds))
}

/// Loads a feature file (binary or CSV) with its manifest and, if present,
/// ground-truth factors. Without a manifest, folds come from a CSV `fold`
/// column or a seeded round-robin assignment.
pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        Some(load_manifest(&fs::read_to_string(&mpath)?)?)
    } else {
        None
    };

    let (d_in, classes_hint, records, csv_folds) = if bytes.starts_with(FEATURE_MAGIC) || bytes.len() < 8 {
        let (h, records) = read_features(bytes.as_slice())?;
        (h.d_in, Some(h.classes), records, None)
    } else {
        let (d_in, records, folds) = read_features_csv(&bytes)?;
        (d_in, None, records, folds)
    };

    let manifest = match manifest {
        Some(m) => {
            if m.d_in != d_in {
                return Err(DataError::Dimension {
                    record: 0,
                    expected: m.d_in,
                    found: d_in,
                });
            }
            if let Some(c) = classes_hint {
                if c != m.classes {
                    return Err(DataError::Manifest(format!(
                        "manifest declares {} classes, feature header {c}",
                        m.classes
                    )));
                }
            }
            m
        }
        None => {
            let classes = classes_hint
                .unwrap_or_else(|| records.iter().map(|r| r.y_e + 1).max().unwrap_or(1));
            let (folds, fold_of) = match csv_folds {
                Some(f) => (f.iter().copied().max().unwrap_or(1), f),
                None => (DEFAULT_FOLDS, assign_folds(records.len(), DEFAULT_FOLDS, 0)),
            };
            DatasetManifest {
                d_in,
                classes,
                class_names: default_class_names(classes),
                count: records.len(),
                folds,
                fold_of,
                provenance: format!("loaded from {}", path.display()),
            }
        }
    };
    let tpath = truth_path(path);
    let truth = if tpath.exists() {
        Some(load_truth(fs::File::open(tpath)?)?)
    } else {
        None
    };
    let ds = Dataset {
        manifest,
        records,
        truth,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `<path>` (binary features), `<stem>.manifest` and, when present, `<stem>.truth`.
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let path = path.as_ref();
    write_features(
        fs::File::create(path)?,
        dataset.d_in(),
        dataset.classes(),
        &dataset.records,
    )?;
    write_manifest(fs::File::create(manifest_path(path))?, &dataset.manifest)?;
    if let Some(truth) = &dataset.truth {
        write_truth(fs::File::create(truth_path(path))?, truth)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<FeatureRecord> {
        (0..5)
            .map(|i| FeatureRecord {
                h_a: vec![i as f64, -0.5, 1e-300],
                h_t: vec![0.25, f64::MIN_POSITIVE, -(i as f64)],
                y_e: i % 3,
            })
            .collect()
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let recs = records();
        let mut buf = Vec::new();
        write_features(&mut buf, 3, 3, &recs).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 4 + 8 + 5 * (6 * 8 + 4));
        let (h, back) = read_features(buf.as_slice()).unwrap();
        assert_eq!(h, FeatureHeader { d_in: 3, classes: 3, count: 5 });
        assert_eq!(back, recs);
        let mut again = Vec::new();
        write_features(&mut again, 3, 3, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn truncation_and_corruption_are_distinct_errors() {
        let mut buf = Vec::new();
        write_features(&mut buf, 3, 3, &records()).unwrap();
        assert!(matches!(read_features(&buf[..10]), Err(DataError::Header(_))));
        assert!(matches!(
            read_features(&buf[..buf.len() - 1]),
            Err(DataError::Truncated { record: 4 })
        ));
        let mut bad = buf.clone();
        bad[3] = b'x';
        assert!(matches!(read_features(bad.as_slice()), Err(DataError::Header(_))));
        let mut bad = buf.clone();
        bad[8] = 2;
        assert!(matches!(read_features(bad.as_slice()), Err(DataError::Version(2))));
    }

    #[test]
    fn rejects_label_out_of_range_and_non_finite() {
        let mut recs = records();
        recs[2].y_e = 7;
        let mut buf = Vec::new();
        write_features(&mut buf, 3, 3, &recs).unwrap();
        assert!(matches!(
            read_features(buf.as_slice()),
            Err(DataError::Label { record: 2, label: 7, classes: 3 })
        ));
        let mut recs = records();
        recs[1].h_t[0] = f64::NAN;
        let mut buf = Vec::new();
        write_features(&mut buf, 3, 3, &recs).unwrap();
        assert!(matches!(
            read_features(buf.as_slice()),
            Err(DataError::NonFinite { record: 1 })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let m = DatasetManifest {
            d_in: 3,
            classes: 2,
            class_names: vec!["angry".into(), "sad".into()],
            count: 4,
            folds: 2,
            fold_of: vec![1, 2, 2, 1],
            provenance: "unit test".into(),
        };
        let mut buf = Vec::new();
        write_manifest(&mut buf, &m).unwrap();
        let back = load_manifest(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(load_manifest("d_in = 3\n").is_err());
        assert!(load_manifest("bogus = 1\n").is_err());
    }

    #[test]
    fn csv_dimension_mismatch_names_record() {
        let text = "label,fold,a0,a1,t0,t1\n0,1,0.1,0.2,0.3,0.4\n1,2,0.5,0.6,0.7\n";
        match read_features_csv(text.as_bytes()) {
            Err(DataError::Dimension { record, .. }) => assert_eq!(record, 1),
            other => panic!("unexpected {other:?}"),
        }
        let (d, recs, folds) = read_features_csv(&text.as_bytes()[..text.find("1,2,").unwrap()]).unwrap();
        assert_eq!(d, 2);
        assert_eq!(recs[0].h_t, vec![0.3, 0.4]);
        assert_eq!(folds, Some(vec![1]));
    }
}

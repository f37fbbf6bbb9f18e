//! Study manifest CSV: `subject_id,study_id,view,image_path,labels,split`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classes::{LabelVector, View};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One image of one study.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub study_id: String,
    pub view: View,
    pub image_path: String,
    pub labels: LabelVector,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory that relative image paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Self {
        Manifest {
            rows,
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        let expected = [
            "subject_id",
            "study_id",
            "view",
            "image_path",
            "labels",
            "split",
        ];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Validation(format!(
                "manifest header must be {}, got {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize().enumerate() {
            let row: ManifestRow = rec.map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => Error::Csv(e),
                _ => Error::Validation(format!("manifest row {}: {e}", i + 1)),
            })?;
            rows.push(row);
        }
        Ok(Manifest::new(rows))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)?;
        let mut m = Self::from_reader(f)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            writer.write_record([
                "subject_id",
                "study_id",
                "view",
                "image_path",
                "labels",
                "split",
            ])?;
        }
        for r in &self.rows {
            writer.serialize(r)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(f))
    }

    /// Writes to `path`, turning image paths absolute when `path` lies outside
    /// the directory they are relative to.
    pub fn write_rebased(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let target = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let here = std::fs::canonicalize(target)?;
        let base = if self.base_dir.as_os_str().is_empty() {
            std::fs::canonicalize(".")?
        } else {
            std::fs::canonicalize(&self.base_dir)?
        };
        if here == base {
            return self.write(path);
        }
        let mut m = self.clone();
        for r in &mut m.rows {
            let p = Path::new(&r.image_path);
            if p.is_relative() {
                r.image_path = base.join(p).to_string_lossy().into_owned();
            }
        }
        m.write(path)
    }

    pub fn resolve(&self, image_path: &str) -> PathBuf {
        let p = Path::new(image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn filter_split(&self, split: Split) -> Manifest {
        Manifest {
            rows: self
                .rows
                .iter()
                .filter(|r| r.split == Some(split))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Rows grouped by study id, in first-appearance order of the study.
    pub fn studies(&self) -> Vec<(String, Vec<&ManifestRow>)> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
        for r in &self.rows {
            let e = groups.entry(r.study_id.as_str()).or_default();
            if e.is_empty() {
                order.push(r.study_id.clone());
            }
            e.push(r);
        }
        order
            .into_iter()
            .map(|s| {
                let rows = groups.remove(s.as_str()).expect("grouped");
                (s, rows)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_empty_split() {
        let m = Manifest::new(vec![
            ManifestRow {
                subject_id: "s1".into(),
                study_id: "st1".into(),
                view: View::Pa,
                image_path: "img/a.pgm".into(),
                labels: LabelVector::from_findings([1, 4]),
                split: None,
            },
            ManifestRow {
                subject_id: "s1".into(),
                study_id: "st1".into(),
                view: View::Lateral,
                image_path: "img/b.pgm".into(),
                labels: LabelVector::from_findings([]),
                split: Some(Split::Test),
            },
        ]);
        let mut buf = Vec::new();
        m.to_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject_id,study_id,view,image_path,labels,split\n"));
        assert!(text.contains("s1,st1,PA,img/a.pgm,01001000000000,\n"));
        assert!(text.contains("LATERAL,img/b.pgm,00000000010000,test"));
        let back = Manifest::from_reader(&buf[..]).unwrap();
        assert_eq!(back.rows, m.rows);
    }

    #[test]
    fn bad_rows_are_validation_errors() {
        let text = "subject_id,study_id,view,image_path,labels,split\ns,t,SIDE,x,00000000010000,\n";
        assert!(matches!(
            Manifest::from_reader(text.as_bytes()),
            Err(Error::Validation(_))
        ));
        let text = "a,b\n1,2\n";
        assert!(matches!(
            Manifest::from_reader(text.as_bytes()),
            Err(Error::Validation(_))
        ));
    }
}

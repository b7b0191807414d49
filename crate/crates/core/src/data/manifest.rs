//! Dataset manifests.
//!
//! ```text
//! crossview-manifest 1
//! split = train
//! aerial_size = 64x64
//! ground_size = 32x128
//! center_aligned = true
//! [pairs]
//! loc000  aerial/loc000.png  ground/loc000.png
//! ```
//!
//! Pair lines hold a location id and two paths relative to the manifest's
//! directory, separated by whitespace. Blank lines and `#` comments are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MAGIC: &str = "crossview-manifest";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}` (train, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub location_id: String,
    pub aerial: PathBuf,
    pub ground: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the pair paths are relative to.
    pub root: PathBuf,
    pub split: Split,
    pub aerial_size: (usize, usize),
    pub ground_size: (usize, usize),
    pub center_aligned: bool,
    pub pairs: Vec<PairEntry>,
}

pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::invalid(format!("size `{s}` is not HxW")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("size `{s}` is not HxW")))
    };
    Ok((parse(h)?, parse(w)?))
}

impl DatasetManifest {
    pub fn aerial_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.pairs[i].aerial)
    }

    pub fn ground_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.pairs[i].ground)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if p.location_id.is_empty() || p.location_id.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("bad location id `{}`", p.location_id)));
            }
            if !seen.insert(&p.location_id) {
                return Err(Error::invalid(format!("duplicate location id `{}`", p.location_id)));
            }
        }
        Ok(())
    }

    /// Fails with the first referenced file that does not exist.
    pub fn check_files(&self) -> Result<()> {
        for i in 0..self.pairs.len() {
            for path in [self.aerial_path(i), self.ground_path(i)] {
                if !path.is_file() {
                    return Err(Error::io(
                        path,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file not found"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} {VERSION}\n");
        let _ = writeln!(s, "split = {}", self.split.as_str());
        let _ = writeln!(s, "aerial_size = {}x{}", self.aerial_size.0, self.aerial_size.1);
        let _ = writeln!(s, "ground_size = {}x{}", self.ground_size.0, self.ground_size.1);
        let _ = writeln!(s, "center_aligned = {}", self.center_aligned);
        s.push_str("[pairs]\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{}\t{}\t{}", p.location_id, p.aerial.display(), p.ground.display());
        }
        s
    }

    pub fn parse(text: &str, root: &Path, source: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, l)) if l.split_whitespace().next() == Some(MAGIC) => {
                let v = l.split_whitespace().nth(1).unwrap_or("");
                if v != VERSION.to_string() {
                    return Err(err(1, format!("unsupported manifest version `{v}`")));
                }
            }
            _ => return Err(err(1, format!("missing `{MAGIC} {VERSION}` header"))),
        }
        let (mut split, mut aerial, mut ground, mut aligned) = (None, None, None, None);
        let mut pairs = Vec::new();
        let mut in_pairs = false;
        let mut pairs_line = 0;
        for (no, line) in lines {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !in_pairs {
                if line == "[pairs]" {
                    in_pairs = true;
                    pairs_line = no;
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(no, format!("expected key = value, got `{line}`")))?;
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "split" => split = Some(v.parse::<Split>().map_err(|e| err(no, e.to_string()))?),
                    "aerial_size" => aerial = Some(parse_size(v).map_err(|e| err(no, e.to_string()))?),
                    "ground_size" => ground = Some(parse_size(v).map_err(|e| err(no, e.to_string()))?),
                    "center_aligned" => {
                        aligned = Some(v.parse::<bool>().map_err(|_| err(no, format!("bad boolean `{v}`")))?)
                    }
                    _ => return Err(err(no, format!("unknown header key `{k}`"))),
                }
            } else {
                let fields: Vec<&str> = line.split_whitespace().collect();
                let [id, a, g] = fields[..] else {
                    return Err(err(no, format!("expected `id aerial ground`, got {} fields", fields.len())));
                };
                if pairs.iter().any(|p: &PairEntry| p.location_id == id) {
                    return Err(err(no, format!("duplicate location id `{id}`")));
                }
                pairs.push(PairEntry {
                    location_id: id.to_string(),
                    aerial: PathBuf::from(a),
                    ground: PathBuf::from(g),
                });
            }
        }
        let end = text.lines().count().max(1);
        if !in_pairs {
            return Err(err(end, "missing [pairs] section".into()));
        }
        let missing = |key: &str| err(pairs_line, format!("header key `{key}` missing"));
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            split: split.ok_or_else(|| missing("split"))?,
            aerial_size: aerial.ok_or_else(|| missing("aerial_size"))?,
            ground_size: ground.ok_or_else(|| missing("ground_size"))?,
            center_aligned: aligned.ok_or_else(|| missing("center_aligned"))?,
            pairs,
        })
    }

    /// Reads a manifest file; pair paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &root, path)
    }

    /// Writes `root/manifest.txt` atomically and returns its path.
    pub fn save(&self) -> Result<PathBuf> {
        self.validate()?;
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        write_atomic(&path, self.to_text().as_bytes())?;
        Ok(path)
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Options for [`build_manifest`].
#[derive(Clone, Debug)]
pub struct ManifestBuilder {
    pub aerial_dir: String,
    pub ground_dir: String,
    pub extension: String,
    pub split: Split,
    pub aerial_size: (usize, usize),
    pub ground_size: (usize, usize),
    pub center_aligned: bool,
    /// Location ids to leave out.
    pub exclude: HashSet<String>,
}

/// Pairs `root/<aerial_dir>/<id>.<ext>` with `root/<ground_dir>/<id>.<ext>`,
/// sorted by id. Ids present in only one directory are skipped.
pub fn build_manifest(root: &Path, opts: &ManifestBuilder) -> Result<DatasetManifest> {
    let list = |sub: &str| -> Result<Vec<String>> {
        let dir = root.join(sub);
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(opts.extension.as_str()) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    };
    let ground: HashSet<String> = list(&opts.ground_dir)?.into_iter().collect();
    let pairs = list(&opts.aerial_dir)?
        .into_iter()
        .filter(|id| ground.contains(id) && !opts.exclude.contains(id))
        .map(|id| PairEntry {
            aerial: Path::new(&opts.aerial_dir).join(format!("{id}.{}", opts.extension)),
            ground: Path::new(&opts.ground_dir).join(format!("{id}.{}", opts.extension)),
            location_id: id,
        })
        .collect();
    let m = DatasetManifest {
        root: root.to_path_buf(),
        split: opts.split,
        aerial_size: opts.aerial_size,
        ground_size: opts.ground_size,
        center_aligned: opts.center_aligned,
        pairs,
    };
    m.validate()?;
    Ok(m)
}

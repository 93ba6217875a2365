//! On-disk pair datasets.
//!
//! ```text
//! root/manifest.tsv        index <TAB> train|test <TAB> garment spec
//! root/flat/{index:05}.png
//! root/worn/{index:05}.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use alignvtoff_core::synthdata::{is_test_index, render_pair, GarmentSpec, IMAGE_SIZE};
use alignvtoff_core::{Error as CoreError, Tensor};

use crate::error::{core, PipelineError, Result};
use crate::io::{ensure_dir, read_png, write_atomic, write_png};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn of(index: usize) -> Self {
        if is_test_index(index) {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub index: usize,
    pub split: Split,
    pub spec: String,
}

/// A loaded pair, both images `[3, S, S]` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Pair {
    pub index: usize,
    pub flat: Tensor,
    pub worn: Tensor,
}

pub fn image_name(index: usize) -> String {
    format!("{index:05}.png")
}

/// Renders `n` synthetic pairs with `seed` into `out`.
pub fn generate(n: usize, seed: u64, out: &Path) -> Result<Vec<Entry>> {
    ensure_dir(&out.join("flat"))?;
    ensure_dir(&out.join("worn"))?;
    let mut entries = Vec::with_capacity(n);
    let mut manifest = String::new();
    for index in 0..n {
        let p = render_pair(seed, index)?;
        let name = image_name(index);
        write_png(&out.join("flat").join(&name), &p.flat.map(|v| 2.0 * v - 1.0))?;
        write_png(&out.join("worn").join(&name), &p.worn.map(|v| 2.0 * v - 1.0))?;
        let e = Entry { index, split: Split::of(index), spec: p.spec.serialize() };
        manifest.push_str(&format!("{}\t{}\t{}\n", e.index, e.split.name(), e.spec));
        entries.push(e);
        if (index + 1) % 500 == 0 {
            log::info!("rendered {}/{n} pairs", index + 1);
        }
    }
    write_atomic(&out.join(MANIFEST), manifest.as_bytes())?;
    Ok(entries)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| core(CoreError::Format, format!("{} line {}: {what}", path.display(), n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [index, split, spec] = f.as_slice() else {
                return Err(bad("expected index, split and spec"));
            };
            let index: usize = index.parse().map_err(|_| bad("bad index"))?;
            let split = match *split {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split must be train or test")),
            };
            GarmentSpec::parse(spec).map_err(|e| bad(&e.to_string()))?;
            entries.push(Entry { index, split, spec: spec.to_string() });
        }
        if entries.is_empty() {
            return Err(core(CoreError::Size, format!("{} lists no pairs", path.display())));
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn flat_path(&self, index: usize) -> PathBuf {
        self.root.join("flat").join(image_name(index))
    }

    pub fn worn_path(&self, index: usize) -> PathBuf {
        self.root.join("worn").join(image_name(index))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.index).collect()
    }

    pub fn load(&self, split: Split) -> Result<Vec<Pair>> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Err(core(CoreError::Size, format!("no {} pairs in {}", split.name(), self.root.display())));
        }
        idx.into_iter()
            .map(|index| {
                Ok(Pair { index, flat: read_png(&self.flat_path(index), IMAGE_SIZE)?, worn: read_png(&self.worn_path(index), IMAGE_SIZE)? })
            })
            .collect()
    }
}

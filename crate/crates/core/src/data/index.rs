use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// File extensions treated as images.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Position of one image inside a [`DatasetIndex`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemRef {
    pub class: usize,
    pub item: usize,
}

#[derive(Clone, Debug)]
pub struct ClassEntry {
    pub name: String,
    pub items: Vec<PathBuf>,
}

/// Class-per-directory image dataset: `root/<class>/<image files>`.
///
/// Classes and items are sorted lexicographically so that indices are stable
/// across machines.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    root: PathBuf,
    classes: Vec<ClassEntry>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Reads the image header so that corrupt files fail at index time.
fn probe_image(path: &Path) -> Result<()> {
    let fail = |reason: String| Error::Image { path: path.to_path_buf(), reason };
    let reader = image::ImageReader::open(path)
        .map_err(|e| fail(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| fail(e.to_string()))?;
    let (w, h) = reader.into_dimensions().map_err(|e| fail(e.to_string()))?;
    if w == 0 || h == 0 {
        return Err(fail("zero-sized image".into()));
    }
    Ok(())
}

/// Scans `root` for one subdirectory per class.
pub fn build_index(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let read = |p: &Path| fs::read_dir(p).map_err(|e| Error::io(format!("listing {}", p.display()), e));

    let mut class_dirs = Vec::new();
    for entry in read(root)? {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_dir() && !hidden {
            class_dirs.push(path);
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::NoClasses(root.to_path_buf()));
    }
    class_dirs.sort();

    let mut classes = Vec::with_capacity(class_dirs.len());
    for dir in class_dirs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut items = Vec::new();
        for entry in read(&dir)? {
            let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
            let path = entry.path();
            if path.is_file() && is_image(&path) {
                items.push(path);
            }
        }
        if items.is_empty() {
            return Err(Error::EmptyClass(name));
        }
        items.sort();
        for item in &items {
            probe_image(item)?;
        }
        classes.push(ClassEntry { name, items });
    }
    Ok(DatasetIndex { root: root.to_path_buf(), classes })
}

impl DatasetIndex {
    /// Index over in-memory entries; used by tests and tools that already
    /// know their file lists. Entries are sorted like [`build_index`] does.
    pub fn from_entries(root: impl Into<PathBuf>, mut classes: Vec<ClassEntry>) -> Result<Self> {
        classes.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in classes.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(Error::DuplicateClass(pair[0].name.clone()));
            }
        }
        for c in &mut classes {
            if c.items.is_empty() {
                return Err(Error::EmptyClass(c.name.clone()));
            }
            c.items.sort();
        }
        if classes.is_empty() {
            let root = root.into();
            return Err(Error::NoClasses(root));
        }
        Ok(Self { root: root.into(), classes })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }

    pub fn class_position(&self, name: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.name.as_str().cmp(name)).ok()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_items(&self) -> usize {
        self.classes.iter().map(|c| c.items.len()).sum()
    }

    pub fn path(&self, item: ItemRef) -> &Path {
        &self.classes[item.class].items[item.item]
    }

    /// Human-readable identity of the dataset (its directory name).
    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.root.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, value: u8) {
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([value, value, value]));
        img.save(path).unwrap();
    }

    #[test]
    fn counts_classes_and_items() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["b", "a", "c"] {
            let cd = dir.path().join(c);
            fs::create_dir(&cd).unwrap();
            for i in 0..10 {
                write_png(&cd.join(format!("{i:02}.png")), i as u8);
            }
        }
        fs::write(dir.path().join("a").join("notes.txt"), "ignored").unwrap();
        let index = build_index(dir.path()).unwrap();
        assert_eq!(index.num_classes(), 3);
        assert_eq!(index.num_items(), 30);
        assert_eq!(index.class_names().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert!(index.classes()[0].items.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_root_has_no_classes() {
        let dir = tempfile::tempdir().unwrap();
        let err = build_index(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no classes found"), "{err}");
    }

    #[test]
    fn missing_root_is_fatal() {
        let err = build_index("/definitely/not/here").unwrap_err();
        assert!(matches!(err, Error::MissingRoot(_)));
    }

    #[test]
    fn empty_class_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("full")).unwrap();
        write_png(&dir.path().join("full").join("x.png"), 1);
        fs::create_dir(dir.path().join("hollow")).unwrap();
        let err = build_index(dir.path()).unwrap_err();
        assert!(err.to_string().contains("'hollow'"), "{err}");
    }

    #[test]
    fn corrupt_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cd = dir.path().join("cls");
        fs::create_dir(&cd).unwrap();
        write_png(&cd.join("good.png"), 7);
        fs::write(cd.join("broken.png"), b"definitely not a png").unwrap();
        let err = build_index(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Image { .. }));
        assert!(err.to_string().contains("broken.png"), "{err}");
    }
}

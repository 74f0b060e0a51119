use std::path::Path;

/// Class names indexed by class id. Loaded from a UTF-8 file with one name per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels(Vec<String>);

impl Labels {
    pub fn new(names: Vec<String>) -> Self {
        Self(names)
    }

    /// Placeholder names `class_0 .. class_{n-1}`.
    pub fn generated(count: usize) -> Self {
        Self((0..count).map(|i| format!("class_{i}")).collect())
    }

    /// Parses label text. Trailing whitespace and a trailing empty line are ignored;
    /// blank lines in the middle keep their index.
    pub fn parse(text: &str) -> Self {
        let mut names: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches(['\r', ' ', '\t']).to_string())
            .collect();
        while names.last().is_some_and(|n| n.is_empty()) {
            names.pop();
        }
        Self(names)
    }

    pub fn from_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Name for `index`, or `class_{index}` when out of range.
    pub fn name(&self, index: usize) -> String {
        self.0
            .get(index)
            .cloned()
            .unwrap_or_else(|| format!("class_{index}"))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

use std::fmt;

/// Something that can be selected by name at runtime.
pub trait Named {
    fn name(&self) -> &'static str;
}

/// Name-indexed set of strategy objects sharing one trait.
///
/// Registration order is kept; it decides which strategy wins when several
/// could handle the same input (see [`Registry::find`]).
pub struct Registry<T: ?Sized> {
    entries: Vec<Box<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Adds a strategy, replacing any earlier one with the same name.
    pub fn register(&mut self, entry: Box<T>) -> &mut Self {
        self.entries.retain(|e| e.name() != entry.name());
        self.entries.push(entry);
        self
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        self.entries.iter().find(|e| e.name() == name).map(|e| e.as_ref())
    }

    /// First registered strategy accepted by `pred`.
    pub fn find(&self, mut pred: impl FnMut(&T) -> bool) -> Option<&T> {
        self.entries.iter().map(|e| e.as_ref()).find(|e| pred(e))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter().map(|e| e.as_ref())
    }
}

impl<T: ?Sized + Named> Default for Registry<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: ?Sized + Named> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

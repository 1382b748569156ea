use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdEntry {
    pub path: String,
    pub managed: bool,
}

/// Open file descriptors seen by the stage, live between open and close.
#[derive(Debug, Default)]
pub struct FdTable {
    table: BTreeMap<i32, FdEntry>,
}

impl FdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, fd: i32, path: String, managed: bool) {
        self.table.insert(fd, FdEntry { path, managed });
    }

    pub fn remove(&mut self, fd: i32) -> Option<FdEntry> {
        self.table.remove(&fd)
    }

    pub fn get(&self, fd: i32) -> Option<&FdEntry> {
        self.table.get(&fd)
    }

    pub fn is_managed(&self, fd: i32) -> bool {
        self.table.get(&fd).is_some_and(|e| e.managed)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

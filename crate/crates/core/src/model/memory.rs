use std::ops::Range;

use super::config::ModelConfig;
use crate::data::{ClassId, ClassTable};
use crate::error::{Error, Result};

/// Split of the `N` global-memory slots: thing slots first, then one fixed
/// slot per stuff class in ascending class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotLayout {
    memory: usize,
    stuff_classes: Vec<ClassId>,
}

impl SlotLayout {
    pub fn new(memory: usize, mut stuff_classes: Vec<ClassId>) -> Result<Self> {
        stuff_classes.sort_unstable();
        stuff_classes.dedup();
        if memory <= stuff_classes.len() {
            return Err(Error::Config(format!(
                "global memory N={memory} must exceed the {} stuff classes",
                stuff_classes.len()
            )));
        }
        Ok(Self {
            memory,
            stuff_classes,
        })
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn thing_slots(&self) -> Range<usize> {
        0..self.memory - self.stuff_classes.len()
    }

    pub fn stuff_slots(&self) -> Range<usize> {
        self.memory - self.stuff_classes.len()..self.memory
    }

    pub fn stuff_classes(&self) -> &[ClassId] {
        &self.stuff_classes
    }

    /// Stuff class bound to `slot`, if it is a stuff slot.
    pub fn stuff_class_of(&self, slot: usize) -> Option<ClassId> {
        let first = self.thing_slots().end;
        (slot >= first && slot < self.memory).then(|| self.stuff_classes[slot - first])
    }

    pub fn slot_of_stuff(&self, class: ClassId) -> Option<usize> {
        self.stuff_classes
            .binary_search(&class)
            .ok()
            .map(|j| self.thing_slots().end + j)
    }

    pub fn is_thing_slot(&self, slot: usize) -> bool {
        slot < self.thing_slots().end
    }
}

/// Slot layout for `config` with the stuff classes of `table`.
pub fn init_memory(config: &ModelConfig, table: &ClassTable) -> Result<SlotLayout> {
    let stuff = table.stuff_classes();
    if table.len() != config.classes {
        return Err(Error::Config(format!(
            "class table has {} classes, config D={}",
            table.len(),
            config.classes
        )));
    }
    if stuff.len() != config.stuff_count {
        return Err(Error::Config(format!(
            "class table has {} stuff classes, config stuff_count={}",
            stuff.len(),
            config.stuff_count
        )));
    }
    SlotLayout::new(config.memory, stuff)
}

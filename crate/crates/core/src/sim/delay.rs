use std::collections::VecDeque;

use super::InputProfile;

/// Fixed-length FIFO realizing a `d`-step actuation delay.
///
/// The queue is pre-filled with `d` copies of the warm-up profile, so the plant
/// receives that profile until the first command has aged `d` steps.
#[derive(Debug, Clone)]
pub struct DelayBuffer<T> {
    delay: usize,
    queue: VecDeque<InputProfile<T>>,
}

impl<T: Clone> DelayBuffer<T> {
    pub fn new(delay: usize, fill: InputProfile<T>) -> Self {
        let queue = std::iter::repeat_n(fill, delay).collect();
        Self { delay, queue }
    }

    #[inline]
    pub fn delay(&self) -> usize {
        self.delay
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.queue.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Pushes the newest command and returns the one issued `d` steps ago.
    pub fn push_pop(&mut self, current: InputProfile<T>) -> InputProfile<T> {
        if self.delay == 0 {
            return current;
        }
        self.queue.push_back(current);
        self.queue
            .pop_front()
            .expect("delay buffer holds d entries after push")
    }
}

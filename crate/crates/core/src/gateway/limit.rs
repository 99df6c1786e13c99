use std::sync::{Condvar, Mutex};

/// Counting semaphore.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    released: Condvar,
    capacity: usize,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self { available: Mutex::new(capacity), released: Condvar::new(), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("limiter lock");
        while *available == 0 {
            available = self.released.wait(available).expect("limiter lock");
        }
        *available -= 1;
        Permit { limiter: self }
    }
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.limiter.available.lock().expect("limiter lock");
        *available += 1;
        self.limiter.released.notify_one();
    }
}

//! Per-thread accounting for array storage and multiply-accumulates.
//!
//! Every [`Buffer`] registers its byte size on creation and releases it on
//! drop, so the high-water mark of live array storage on the current thread
//! can be read back deterministically. Forward kernels report their MAC cost
//! to the same thread-local ledger.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

fn register(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes of array storage currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Reset the high-water mark to the current live size.
pub fn reset_peak() {
    let now = live_bytes();
    PEAK.with(|p| p.set(now));
}

pub fn add_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

pub fn macs() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_macs() {
    MACS.with(|m| m.set(0));
}

/// Tracked `f64` storage.
#[derive(Debug, PartialEq)]
pub struct Buffer(Vec<f64>);

impl Buffer {
    pub fn new(data: Vec<f64>) -> Self {
        register(data.capacity() * std::mem::size_of::<f64>());
        Buffer(data)
    }

    pub fn zeros(len: usize) -> Self {
        Buffer::new(vec![0.0; len])
    }

    pub fn bytes(&self) -> usize {
        self.0.capacity() * std::mem::size_of::<f64>()
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        release(self.bytes());
        std::mem::take(&mut self.0)
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        release(self.bytes());
    }
}

impl Deref for Buffer {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

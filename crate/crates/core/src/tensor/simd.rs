//! Runtime selection of 256-bit vector code for the hot loops.
//!
//! The same loop bodies are compiled twice, once for the baseline target and
//! once with AVX2 enabled. No fused multiply-add is ever emitted, so both
//! versions produce bit-identical results.

use core::sync::atomic::{AtomicU8, Ordering};

static LEVEL: AtomicU8 = AtomicU8::new(0);

const UNKNOWN: u8 = 0;
const BASELINE: u8 = 1;
const WIDE: u8 = 2;

/// True when the CPU and OS support AVX2.
#[inline]
pub fn wide_vectors() -> bool {
    match LEVEL.load(Ordering::Relaxed) {
        UNKNOWN => {
            let level = if detect() { WIDE } else { BASELINE };
            LEVEL.store(level, Ordering::Relaxed);
            level == WIDE
        }
        level => level == WIDE,
    }
}

/// Forces the baseline code path (`false`) or re-enables detection (`true`).
pub fn allow_wide_vectors(allow: bool) {
    LEVEL.store(if allow { UNKNOWN } else { BASELINE }, Ordering::Relaxed);
}

#[cfg(target_arch = "x86_64")]
#[allow(unused_unsafe)]
fn detect() -> bool {
    use core::arch::x86_64::{__cpuid, __cpuid_count};
    let max_leaf = unsafe { __cpuid(0) }.eax;
    if max_leaf < 7 {
        return false;
    }
    let leaf1 = unsafe { __cpuid(1) };
    let osxsave = leaf1.ecx & (1 << 27) != 0;
    let avx = leaf1.ecx & (1 << 28) != 0;
    if !(osxsave && avx) {
        return false;
    }
    // SAFETY: OSXSAVE is set, so XGETBV is available.
    let xcr0 = unsafe { xgetbv0() };
    if xcr0 & 0b110 != 0b110 {
        return false;
    }
    unsafe { __cpuid_count(7, 0) }.ebx & (1 << 5) != 0
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "xsave")]
unsafe fn xgetbv0() -> u64 {
    core::arch::x86_64::_xgetbv(0)
}

#[cfg(not(target_arch = "x86_64"))]
fn detect() -> bool {
    false
}

/// Defines `$name` calling the `#[inline(always)]` body `$body`, dispatching
/// to an AVX2-compiled copy when available.
macro_rules! dispatch {
    ($(#[$meta:meta])* fn $name:ident / $wide:ident = $body:ident($($arg:ident: $ty:ty),* $(,)?)) => {
        $(#[$meta])*
        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if $crate::tensor::simd::wide_vectors() {
                // SAFETY: AVX2 support was verified at runtime.
                unsafe { $wide($($arg),*) };
                return;
            }
            $body($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $wide($($arg: $ty),*) {
            $body($($arg),*)
        }
    };
}

pub(crate) use dispatch;

//! Subnormal handling.
//!
//! Subnormal floats slow x86 arithmetic by an order of magnitude and show
//! up routinely in gradients of saturated sigmoids. Every [`Tape`](crate::Tape)
//! turns on flush-to-zero and denormals-are-zero for its thread, so all
//! differentiable work runs in one consistent mode.

/// Enables FTZ and DAZ on the calling thread. No-op on targets without SSE.
pub fn flush_subnormals() {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    {
        const FTZ: u32 = 1 << 15;
        const DAZ: u32 = 1 << 6;
        let mut csr: u32 = 0;
        // SAFETY: stmxcsr/ldmxcsr touch only MXCSR, and only the FTZ and DAZ
        // control bits change.
        unsafe {
            std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack, preserves_flags));
            if csr & (FTZ | DAZ) != FTZ | DAZ {
                csr |= FTZ | DAZ;
                std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, preserves_flags));
            }
        }
    }
}

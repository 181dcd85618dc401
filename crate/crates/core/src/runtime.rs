//! Process-level tuning.

/// Keeps freed memory in the allocator instead of handing large blocks
/// back to the kernel after every operation. Episodes allocate and drop
/// many multi-megabyte buffers; with the default glibc settings each of
/// them is mapped fresh and page-faulted in again, which can cost a third
/// of the training time. No-op on other platforms. Affects the whole
/// process; call once at startup.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}

//! Allocator tuning for long training runs.

/// Keeps freed heap memory in the process instead of handing it back to the
/// kernel. Training allocates and drops many same-sized tensor buffers per
/// step; with glibc defaults the large ones are mapped and unmapped every
/// time. A no-op outside glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters and is called before
    // any concurrent allocation could observe the change.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 64 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

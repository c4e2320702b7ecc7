"""Cross-modal instruction-following navigation agent on synthetic panoramic worlds."""

use std::sync::Arc;

/// Counts model tokens in a text.
///
/// Implementations must return 0 for the empty string and never count a
/// concatenation as shorter than either part.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    fn name(&self) -> &'static str;
}

impl<T: TokenCounter + ?Sized> TokenCounter for Arc<T> {
    fn count(&self, text: &str) -> usize {
        (**self).count(text)
    }
    fn name(&self) -> &'static str {
        (**self).name()
    }
}

/// `ceil(utf8_bytes / 4)`; the default counter.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
    fn name(&self) -> &'static str {
        "approx-bytes/4"
    }
}

/// Whitespace-delimited word count.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenCounter;

impl TokenCounter for WhitespaceTokenCounter {
    fn count(&self, text: &str) -> usize {
        crate::text::word_count(text)
    }
    fn name(&self) -> &'static str {
        "whitespace"
    }
}

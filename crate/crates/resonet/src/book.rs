// Guide chapters are doc-tested; populated once the book exists.

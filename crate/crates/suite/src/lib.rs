//! Holds the `acceptance` test target, which trains real models and takes
//! hours. It lives in its own package so the quick unit, format and service
//! tests of the other crates run (and report) before it.

//! Holds the `acceptance` test target, kept in its own package so that a
//! failing criterion does not stop cargo from running ctsim's other tests.

//! Holds the `acceptance` test target (`cargo test -p distaudit-validation`);
//! there is no library code here.

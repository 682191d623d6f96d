//! Hosts the `acceptance` target, which runs after every other suite in a
//! workspace test run. Run it alone with
//! `cargo test -p nica-validation --test acceptance`.

fn main() {
    beamselect::harness::cli_main();
}

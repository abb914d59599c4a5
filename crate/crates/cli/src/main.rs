// SPDX-License-Identifier: Apache-2.0

fn main() {
    let argv = std::env::args_os().map(|a| a.to_string_lossy().into_owned());
    std::process::exit(av3d_cli::run(argv));
}

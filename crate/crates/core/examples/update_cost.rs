//! Operation counts of a single per-source update: ISS needs no linear
//! solves, IP needs one per source and bin.

use online_auxiva::pipeline::bench_update;
use online_auxiva::separator::UpdateMethod;

fn main() -> online_auxiva::Result<()> {
    println!(
        "{:>3} {:>16} {:>16} {:>10} {:>10}",
        "K", "ISS cmac", "IP cmac", "ISS solve", "IP solve"
    );
    for k in [2, 3, 4, 6, 8] {
        let iss = bench_update(k, 129, 50, UpdateMethod::Iss, 0)?;
        let ip = bench_update(k, 129, 50, UpdateMethod::Ip, 0)?;
        println!(
            "{k:>3} {:>16.1} {:>16.1} {:>10.2} {:>10.2}",
            iss.cmacs_per_source_update,
            ip.cmacs_per_source_update,
            iss.solves_per_source_update,
            ip.solves_per_source_update
        );
    }
    Ok(())
}

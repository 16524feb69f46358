use rilab::lattice::{LatticeBox, Point};
use rilab::randomness::derive_stream;
use rilab::walk::{truncated_trajectory, EscapePolicy};

fn main() {
    // coupled window-content comparison rho=2 vs rho=8
    let window = LatticeBox::new(Point::origin(5), 8);
    let reps = 3000u64;
    for rho in [2.0f64, 4.0, 8.0] {
        let policy = EscapePolicy::new(rho, 50_000_000);
        let mut len_total = 0u64;
        let mut pts_total = 0u64;
        for rep in 0..reps {
            let mut s = derive_stream(43, "bias", rep);
            let start = Point::new(&[-8, 0, 0, 0, 0]);
            let out = truncated_trajectory(&mut s, start, &window, &policy);
            len_total += out.path.len() as u64;
            let in_window = out.path.points().filter(|p| window.contains(p)).collect::<rilab::util::FxHashSet<_>>();
            pts_total += in_window.len() as u64;
        }
        println!("rho={rho}: mean len {}, mean distinct window pts {}", len_total as f64/reps as f64, pts_total as f64/reps as f64);
    }
    // tail in multiplier at fixed r=8
    let window = LatticeBox::new(Point::origin(5), 8);
    let policy = EscapePolicy::new(4.0, 50_000_000);
    let mut lens = Vec::new();
    for rep in 0..2000u64 {
        let mut s = derive_stream(17, "tail", rep);
        let out = truncated_trajectory(&mut s, Point::origin(5), &window, &policy);
        lens.push(out.path.len() as u64);
    }
    for t in [2u64, 5, 10, 20, 40, 80] {
        let frac = lens.iter().filter(|&&l| l > t*64).count() as f64 / lens.len() as f64;
        println!("P(len > {t} r^2) = {frac}");
    }
}

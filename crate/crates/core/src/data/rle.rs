//! Run-length encoding of binary masks in raster order. Runs alternate
//! starting with `false`, so a mask that begins with `true` starts with a
//! zero-length run.

pub fn encode(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut len = 0;
    for &m in mask {
        if m == cur {
            len += 1;
        } else {
            runs.push(len);
            cur = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode(runs: &[usize]) -> Vec<bool> {
    let mut out = Vec::with_capacity(runs.iter().sum());
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r));
    }
    out
}

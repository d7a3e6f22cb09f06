use num_bigint::BigUint;
use num_traits::Pow;

/// `enc^(s·m) · dec^(s·n)`, exact.
pub fn search_space_size(op_count_enc: u64, op_count_dec: u64, m: u32, n: u32, s: u32) -> BigUint {
    BigUint::from(op_count_enc).pow(s * m) * BigUint::from(op_count_dec).pow(s * n)
}

/// `|O|^(s·(m+n))` for a single shared candidate count.
pub fn search_space_size_uniform(op_count: u64, m: u32, n: u32, s: u32) -> BigUint {
    BigUint::from(op_count).pow(s * (m + n))
}

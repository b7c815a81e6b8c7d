//! Parameter-name predicates used to select adapter subsets.

/// 1-based residual group of a block parameter, e.g. `group3.block2.se.w1` → 3.
pub fn group_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("group")?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

/// SE parameter (`se.w1`, `se.b1`, `se.w2`, `se.b2`) inside a block.
pub fn is_se_param(name: &str) -> bool {
    group_of(name).is_some() && name.contains(".se.")
}

/// Main-path block BN layer name, e.g. `group1.block1.bn2`.
pub fn is_main_bn_layer(layer: &str) -> bool {
    group_of(layer).is_some() && (layer.ends_with(".bn1") || layer.ends_with(".bn2"))
}

/// Affine parameter of a main-path block BN layer. Stem and shortcut BN are excluded.
pub fn is_bn_adapter_param(name: &str) -> bool {
    let layer = name.strip_suffix(".gamma").or_else(|| name.strip_suffix(".beta"));
    layer.is_some_and(is_main_bn_layer)
}

/// Layer name of a BN affine parameter.
pub fn bn_layer_of(name: &str) -> Option<&str> {
    name.strip_suffix(".gamma").or_else(|| name.strip_suffix(".beta"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicates() {
        assert_eq!(group_of("group3.block2.se.w1"), Some(3));
        assert_eq!(group_of("stem.conv.weight"), None);
        assert!(is_se_param("group1.block1.se.b2"));
        assert!(!is_se_param("group1.block1.bn1.gamma"));
        assert!(is_bn_adapter_param("group4.block3.bn2.beta"));
        assert!(!is_bn_adapter_param("group2.block1.downsample.bn.gamma"));
        assert!(!is_bn_adapter_param("stem.bn.gamma"));
        assert_eq!(bn_layer_of("stem.bn.beta"), Some("stem.bn"));
    }
}

fn main() {
    // torch-sys exports the libtorch directory it linked against; embed it as
    // an rpath so binaries and tests run without LD_LIBRARY_PATH.
    if let Ok(dir) = std::env::var("DEP_TCH_LIBTORCH_LIB") {
        println!("cargo:rustc-link-arg=-Wl,-rpath,{dir}");
    }
}

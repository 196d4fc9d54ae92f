pub mod ccu;
pub mod chip;
pub mod detector;
pub mod fifo_cdc;
pub mod harness;
pub mod host;
pub mod morphology;
pub mod signal_io;
pub mod spi_link;

use crate::error::{Error, Result};

/// Per-pixel class indices, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Fails with the first pixel whose label is not below `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&c| c as usize >= num_classes) {
            None => Ok(()),
            Some(i) => Err(Error::Label {
                class: self.data[i] as usize,
                num_classes,
                y: i / self.width,
                x: i % self.width,
            }),
        }
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Mask> {
        if height > self.height || width > self.width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "cannot crop {}x{} mask to {height}x{width}",
                self.height, self.width
            )));
        }
        let data = (0..height)
            .flat_map(|y| self.data[y * self.width..y * self.width + width].iter().copied())
            .collect();
        Ok(Mask { height, width, data })
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }
}
